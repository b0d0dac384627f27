#include "stsmcd/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <thread>

#include "stsmcd/raster.hpp"
#include "stsmcd/rng.hpp"

namespace stsmcd::data {

namespace {

// ---------------------------------------------------------------------------
// Scene geometry on the cell grid.

using Point = std::array<double, 2>;  // (row, col) in cell units

struct Polygon {
  std::vector<Point> verts;
  int label = 0;
};

Polygon random_polygon(Rng& rng, std::size_t rows, std::size_t cols, double rmin, double rmax, int label) {
  const double cy = uniform(rng, 0, static_cast<double>(rows));
  const double cx = uniform(rng, 0, static_cast<double>(cols));
  const double base = uniform(rng, rmin, rmax);
  const int n = 3 + static_cast<int>(rng() % 4);
  const double phase = uniform(rng, 0, 2 * std::numbers::pi);
  Polygon p;
  p.label = label;
  for (int k = 0; k < n; ++k) {
    const double jitter = uniform(rng, -0.5, 0.5) * std::numbers::pi / n;
    const double a = phase + 2 * std::numbers::pi * k / n + jitter;
    const double r = base * uniform(rng, 0.6, 1.0);
    p.verts.push_back({cy + r * std::sin(a), cx + r * std::cos(a)});
  }
  return p;
}

// Even-odd test at cell centres.
bool inside(const Polygon& p, double y, double x) {
  bool in = false;
  const std::size_t n = p.verts.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const auto& a = p.verts[i];
    const auto& b = p.verts[j];
    if ((a[0] > y) != (b[0] > y) && x < (b[1] - a[1]) * (y - a[0]) / (b[0] - a[0]) + a[1]) in = !in;
  }
  return in;
}

void paint(LabelMap& cells, const Polygon& p) {
  for (std::size_t r = 0; r < cells.height; ++r)
    for (std::size_t c = 0; c < cells.width; ++c)
      if (inside(p, r + 0.5, c + 0.5)) cells.at(r, c) = p.label;
}

LabelMap rasterize(std::size_t rows, std::size_t cols, int background, const std::vector<Polygon>& objects) {
  LabelMap cells(rows, cols, background);
  for (const auto& p : objects) paint(cells, p);
  return cells;
}

LabelMap upsample_cells(const LabelMap& cells) {
  LabelMap out(cells.height * kCell, cells.width * kCell);
  for (std::size_t i = 0; i < out.height; ++i)
    for (std::size_t j = 0; j < out.width; ++j) out.at(i, j) = cells.at(i / kCell, j / kCell);
  return out;
}

// ---------------------------------------------------------------------------
// Appearance.

enum class Texture { flat, stripes, checker, speckle };

struct Material {
  std::array<double, 3> color;
  Texture texture = Texture::flat;
  double amplitude = 0.0;
};

std::array<double, 3> hsv(double h, double s, double v) {
  const double k = h * 6.0;
  auto f = [&](double n) {
    const double t = std::fmod(n + k, 6.0);
    return v - v * s * std::max(0.0, std::min({t, 4.0 - t, 1.0}));
  };
  return {f(5.0), f(3.0), f(1.0)};
}

// Land-cover class c in 1..K.
Material land_cover(int c, std::size_t K) {
  const double hue = static_cast<double>(c - 1) / static_cast<double>(K);
  const double value = (c - 1) % 2 == 0 ? 0.8 : 0.5;
  static constexpr Texture kinds[] = {Texture::flat, Texture::stripes, Texture::checker};
  return {hsv(hue, 0.7, value), kinds[(c - 1) % 3], 0.06};
}

const std::vector<Material>& damage_materials() {
  // ground, soil, intact roof, then damage levels 2..4 as seen after the event.
  static const std::vector<Material> m = {
      {{0.30, 0.55, 0.25}, Texture::speckle, 0.04}, {{0.60, 0.50, 0.35}, Texture::speckle, 0.04},
      {{0.82, 0.82, 0.86}, Texture::checker, 0.04}, {{0.85, 0.75, 0.35}, Texture::stripes, 0.08},
      {{0.60, 0.35, 0.20}, Texture::checker, 0.10}, {{0.20, 0.15, 0.12}, Texture::speckle, 0.10},
  };
  return m;
}

double texture_value(Texture t, std::size_t i, std::size_t j, Rng& rng) {
  switch (t) {
    case Texture::flat: return 0.0;
    case Texture::stripes: return (i / 2) % 2 ? 1.0 : -1.0;
    case Texture::checker: return ((i / 2) + (j / 2)) % 2 ? 1.0 : -1.0;
    case Texture::speckle: return uniform(rng, -1.0, 1.0);
  }
  return 0.0;
}

// materials[cells(r, c)] painted per pixel, plus a global tint and sensor
// noise. The tint differs between acquisitions.
Tensor render(const LabelMap& cells, const std::vector<Material>& materials, Rng& rng) {
  const std::size_t H = cells.height * kCell, W = cells.width * kCell;
  std::array<double, 3> tint;
  for (double& t : tint) t = uniform(rng, -0.03, 0.03);
  std::normal_distribution<double> noise(0.0, 0.015);
  Tensor img({H, W, 3});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const Material& m = materials[static_cast<std::size_t>(cells.at(i / kCell, j / kCell))];
      const double tex = m.amplitude * texture_value(m.texture, i, j, rng);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        img.at({i, j, ch}) = std::clamp(m.color[ch] + tex + tint[ch] + noise(rng), 0.0, 1.0);
      }
    }
  return img;
}

double fraction_of(const LabelMap& m, int value) {
  return static_cast<double>(std::count(m.data.begin(), m.data.end(), value)) / static_cast<double>(m.size());
}

// ---------------------------------------------------------------------------
// Scene generators. Each returns false when the draw misses the foreground
// fraction window and must be retried.

int random_class(Rng& rng, std::size_t K) { return 1 + static_cast<int>(rng() % K); }

bool land_cover_pair(const DatasetInfo& info, Rng& rng, Sample& s) {
  const std::size_t rows = info.height / kCell, cols = info.width / kCell, K = info.semantic_classes;
  const double span = static_cast<double>(std::min(rows, cols));
  const int background = random_class(rng, K);
  std::vector<Polygon> objects;
  const int large = 2 + static_cast<int>(rng() % 3), small = 3 + static_cast<int>(rng() % 4);
  for (int k = 0; k < large; ++k) objects.push_back(random_polygon(rng, rows, cols, span / 4, span / 2, random_class(rng, K)));
  for (int k = 0; k < small; ++k) objects.push_back(random_polygon(rng, rows, cols, 1.5, span / 5, random_class(rng, K)));

  // T2: relabel or remove some objects, then add new ones.
  std::vector<Polygon> later;
  for (const auto& p : objects) {
    const double u = uniform(rng, 0, 1);
    if (u < 0.15) continue;
    Polygon q = p;
    if (u < 0.4 && K > 1) {
      while (q.label == p.label) q.label = random_class(rng, K);
    }
    later.push_back(std::move(q));
  }
  const int added = static_cast<int>(rng() % 3);
  for (int k = 0; k < added; ++k) later.push_back(random_polygon(rng, rows, cols, 1.5, span / 4, random_class(rng, K)));

  const LabelMap c1 = rasterize(rows, cols, background, objects);
  const LabelMap c2 = rasterize(rows, cols, background, later);
  LabelMap changed(rows, cols);
  for (std::size_t i = 0; i < changed.size(); ++i) changed.data[i] = c1.data[i] != c2.data[i];
  const double f = fraction_of(changed, 1);
  if (f < kMinFraction || f > kMaxFraction) return false;

  std::vector<Material> mats(K + 1, Material{});
  for (std::size_t c = 1; c <= K; ++c) mats[c] = land_cover(static_cast<int>(c), K);
  s.t1 = render(c1, mats, rng);
  s.t2 = render(c2, mats, rng);
  s.change = upsample_cells(changed);
  if (info.task == Task::scd) {
    LabelMap g1 = c1, g2 = c2;
    for (std::size_t i = 0; i < changed.size(); ++i)
      if (!changed.data[i]) g1.data[i] = g2.data[i] = 0;
    s.semantic_t1 = upsample_cells(g1);
    s.semantic_t2 = upsample_cells(g2);
  }
  return true;
}

bool damage_pair(const DatasetInfo& info, Rng& rng, Sample& s) {
  const std::size_t rows = info.height / kCell, cols = info.width / kCell, L = info.damage_levels;
  const double span = static_cast<double>(std::min(rows, cols));
  // Ground: grass (0) with soil patches (1).
  std::vector<Polygon> ground;
  const int patches = 1 + static_cast<int>(rng() % 3);
  for (int k = 0; k < patches; ++k) ground.push_back(random_polygon(rng, rows, cols, span / 6, span / 3, 1));
  const LabelMap base = rasterize(rows, cols, 0, ground);

  // Buildings carry their damage level as the polygon label; every level
  // appears at least once.
  const std::size_t count = L + rng() % (L + 1);
  std::vector<int> levels;
  for (std::size_t k = 0; k < count; ++k) levels.push_back(static_cast<int>(k % L) + 1);
  std::shuffle(levels.begin(), levels.end(), rng);
  std::vector<Polygon> buildings;
  for (int level : levels) buildings.push_back(random_polygon(rng, rows, cols, 1.2, std::max(1.5, span / 7), level));
  const LabelMap damage = rasterize(rows, cols, 0, buildings);
  for (std::size_t l = 1; l <= L; ++l)
    if (std::find(damage.data.begin(), damage.data.end(), static_cast<int>(l)) == damage.data.end()) return false;
  const double f = 1.0 - fraction_of(damage, 0);
  if (f < kMinFraction || f > kMaxFraction) return false;

  const auto& mats = damage_materials();
  const int spread = static_cast<int>(std::max<std::size_t>(L - 1, 1));
  LabelMap m1 = base, m2 = base;
  for (std::size_t i = 0; i < damage.size(); ++i) {
    const int level = damage.data[i];
    if (level == 0) continue;
    m1.data[i] = 2;
    // Level 1 stays intact; the others spread over the three damaged looks.
    m2.data[i] = level == 1 ? 2 : 3 + std::min(2, (level - 2) * 3 / spread);
  }
  s.t1 = render(m1, mats, rng);
  s.t2 = render(m2, mats, rng);
  LabelMap loc(rows, cols);
  for (std::size_t i = 0; i < loc.size(); ++i) loc.data[i] = damage.data[i] > 0;
  s.loc = upsample_cells(loc);
  s.clf = upsample_cells(damage);
  return true;
}

std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu", index);
  return buf;
}

// ---------------------------------------------------------------------------
// Layout.

struct Folder {
  const char* name;
  LabelMap Sample::*labels;
};

std::vector<Folder> label_folders(Task task) {
  switch (task) {
    case Task::bcd: return {{"GT_BCD", &Sample::change}};
    case Task::scd: return {{"GT_BCD", &Sample::change}, {"GT_T1", &Sample::semantic_t1}, {"GT_T2", &Sample::semantic_t2}};
    case Task::bda: return {{"GT_LOC", &Sample::loc}, {"GT_CLF", &Sample::clf}};
  }
  return {};
}

constexpr const char* kExt = ".cmrd";

std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(path.string() + ": expected key=value, got '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

std::uint64_t to_u64(const std::map<std::string, std::string>& kv, const std::string& key,
                     const std::filesystem::path& where) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw FormatError(where.string() + ": missing " + key);
  try {
    std::size_t used = 0;
    const auto v = std::stoull(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::exception&) {
    throw FormatError(where.string() + ": bad value for " + key + ": '" + it->second + "'");
  }
}

}  // namespace

void validate(const DatasetInfo& info) {
  if (info.height == 0 || info.width == 0 || info.height % 32 != 0 || info.width % 32 != 0) {
    throw DomainError("image size " + std::to_string(info.height) + "x" + std::to_string(info.width) +
                      " must be a positive multiple of 32");
  }
  if (info.count == 0) throw DomainError("sample count must be positive");
  if (info.semantic_classes == 0 || info.semantic_classes > 254) throw DomainError("semantic classes must be in 1..254");
  if (info.damage_levels == 0 || info.damage_levels > 254) throw DomainError("damage levels must be in 1..254");
}

Sample synth_sample(const DatasetInfo& info, std::size_t index) {
  validate(info);
  Rng rng(mix_seed(info.seed, index));
  Sample s;
  s.id = sample_id(index);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    const bool ok = info.task == Task::bda ? damage_pair(info, rng, s) : land_cover_pair(info, rng, s);
    if (ok) return s;
  }
  throw DomainError("could not draw sample " + s.id + " within the foreground fraction window");
}

Dataset synth_generate(const DatasetInfo& info, unsigned workers) {
  validate(info);
  Dataset ds{info, std::vector<Sample>(info.count)};
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(info.count)));
  auto run = [&](unsigned w) {
    for (std::size_t i = w; i < info.count; i += workers) ds.samples[i] = synth_sample(info, i);
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  return ds;
}

double foreground_fraction(const Sample& s, Task task) {
  return task == Task::bda ? fraction_of(s.loc, 1) : fraction_of(s.change, 1);
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto folders = label_folders(ds.info.task);
  for (const char* f : {"T1", "T2"}) fs::create_directories(dir / f);
  for (const auto& f : folders) fs::create_directories(dir / f.name);

  std::ofstream meta(dir / "meta.txt", std::ios::trunc);
  meta << "task=" << task_name(ds.info.task) << "\ncount=" << ds.samples.size() << "\nheight=" << ds.info.height
       << "\nwidth=" << ds.info.width << "\nseed=" << ds.info.seed << "\nsemantic_classes=" << ds.info.semantic_classes
       << "\ndamage_levels=" << ds.info.damage_levels << '\n';
  if (!meta) throw IoError("failed writing " + (dir / "meta.txt").string());

  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  for (const auto& s : ds.samples) {
    const std::string file = s.id + kExt;
    raster::save(dir / "T1" / file, s.t1);
    raster::save(dir / "T2" / file, s.t2);
    manifest << s.id << "\tT1/" << file << "\tT2/" << file;
    for (const auto& f : folders) {
      raster::save(dir / f.name / file, s.*(f.labels));
      manifest << '\t' << f.name << '/' << file;
    }
    manifest << '\n';
  }
  if (!manifest) throw IoError("failed writing " + (dir / "manifest.txt").string());
}

Dataset read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory " + dir.string() + " does not exist");
  const auto meta_path = dir / "meta.txt";
  const auto kv = read_key_values(meta_path);
  Dataset ds;
  const auto task = kv.find("task");
  if (task == kv.end()) throw FormatError(meta_path.string() + ": missing task");
  ds.info.task = parse_task(task->second);
  ds.info.height = to_u64(kv, "height", meta_path);
  ds.info.width = to_u64(kv, "width", meta_path);
  ds.info.seed = to_u64(kv, "seed", meta_path);
  ds.info.semantic_classes = to_u64(kv, "semantic_classes", meta_path);
  ds.info.damage_levels = to_u64(kv, "damage_levels", meta_path);
  const std::size_t count = to_u64(kv, "count", meta_path);

  std::map<std::string, LabelMap Sample::*> fields;
  for (const auto& f : label_folders(ds.info.task)) fields[f.name] = f.labels;

  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot open " + (dir / "manifest.txt").string());
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Sample s;
    std::getline(ls, s.id, '\t');
    std::string rel;
    std::size_t found = 0;
    while (std::getline(ls, rel, '\t')) {
      const std::string folder = rel.substr(0, rel.find('/'));
      if (folder == "T1") s.t1 = raster::load_tensor(dir / rel);
      else if (folder == "T2") s.t2 = raster::load_tensor(dir / rel);
      else if (auto it = fields.find(folder); it != fields.end()) s.*(it->second) = raster::load_labels(dir / rel);
      else throw FormatError("manifest entry " + rel + " is not part of a " + task_name(ds.info.task) + " dataset");
      ++found;
    }
    if (found != 2 + fields.size()) throw FormatError("manifest line for " + s.id + " lists " + std::to_string(found) + " files");
    const Shape img{ds.info.height, ds.info.width, 3};
    if (s.t1.shape() != img || s.t2.shape() != img) throw FormatError("sample " + s.id + " images do not match meta.txt");
    for (const auto& [name, field] : fields) {
      if ((s.*field).height != ds.info.height || (s.*field).width != ds.info.width)
        throw FormatError("sample " + s.id + " " + name + " does not match meta.txt");
    }
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.size() != count) {
    throw FormatError("manifest lists " + std::to_string(ds.samples.size()) + " samples, meta.txt says " +
                      std::to_string(count));
  }
  ds.info.count = count;
  return ds;
}

// ---------------------------------------------------------------------------

AugmentDraw draw_augment(std::uint64_t seed) {
  Rng rng(seed);
  AugmentDraw d;
  d.quarter_turns = static_cast<int>(rng() % 4);
  d.flip_lr = (rng() & 1) != 0;
  d.flip_tb = (rng() & 1) != 0;
  return d;
}

namespace {

// Source pixel of output (i, j) after rotating by `turns` quarter turns
// counter-clockwise and then flipping. (h, w) is the source extent.
std::pair<std::size_t, std::size_t> source_of(std::size_t i, std::size_t j, std::size_t h, std::size_t w,
                                              const AugmentDraw& d) {
  const bool odd = d.quarter_turns % 2 != 0;
  const std::size_t oh = odd ? w : h, ow = odd ? h : w;
  if (d.flip_tb) i = oh - 1 - i;
  if (d.flip_lr) j = ow - 1 - j;
  switch (d.quarter_turns % 4) {
    case 1: return {j, w - 1 - i};
    case 2: return {h - 1 - i, w - 1 - j};
    case 3: return {h - 1 - j, i};
    default: return {i, j};
  }
}

}  // namespace

Tensor transform(const Tensor& image, const AugmentDraw& d) {
  if (image.rank() != 3) throw ShapeError("transform: image must be [H,W,C], got " + shape_str(image.shape()));
  const std::size_t h = image.dim(0), w = image.dim(1), C = image.dim(2);
  const bool odd = d.quarter_turns % 2 != 0;
  Tensor out({odd ? w : h, odd ? h : w, C});
  for (std::size_t i = 0; i < out.dim(0); ++i)
    for (std::size_t j = 0; j < out.dim(1); ++j) {
      const auto [si, sj] = source_of(i, j, h, w, d);
      for (std::size_t c = 0; c < C; ++c) out[(i * out.dim(1) + j) * C + c] = image[(si * w + sj) * C + c];
    }
  return out;
}

LabelMap transform(const LabelMap& labels, const AugmentDraw& d) {
  if (labels.size() == 0) return labels;
  const std::size_t h = labels.height, w = labels.width;
  const bool odd = d.quarter_turns % 2 != 0;
  LabelMap out(odd ? w : h, odd ? h : w);
  for (std::size_t i = 0; i < out.height; ++i)
    for (std::size_t j = 0; j < out.width; ++j) {
      const auto [si, sj] = source_of(i, j, h, w, d);
      out.at(i, j) = labels.at(si, sj);
    }
  return out;
}

Sample augment(const Sample& s, const AugmentDraw& d) {
  if (d.identity()) return s;
  Sample out;
  out.id = s.id;
  out.t1 = transform(s.t1, d);
  out.t2 = transform(s.t2, d);
  for (auto field : {&Sample::change, &Sample::semantic_t1, &Sample::semantic_t2, &Sample::loc, &Sample::clf}) {
    out.*field = transform(s.*field, d);
  }
  return out;
}

Sample augment(const Sample& s, std::uint64_t seed) { return augment(s, draw_augment(seed)); }

// ---------------------------------------------------------------------------

Perturbation parse_perturbation(const std::string& spec) {
  if (spec.empty() || spec == "none") return {};
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  if (colon == std::string::npos) throw DomainError("perturbation '" + spec + "' must look like kind:value");
  double value = 0.0;
  try {
    std::size_t used = 0;
    value = std::stod(spec.substr(colon + 1), &used);
    if (used != spec.size() - colon - 1) throw std::invalid_argument(spec);
  } catch (const std::exception&) {
    throw DomainError("perturbation '" + spec + "' has a malformed value");
  }
  Perturbation p;
  p.value = value;
  if (kind == "blur") p.kind = PerturbKind::blur;
  else if (kind == "noise") p.kind = PerturbKind::noise;
  else if (kind == "scale") p.kind = PerturbKind::scale;
  else throw DomainError("unknown perturbation '" + kind + "' (expected blur, noise or scale)");
  if (p.kind == PerturbKind::scale ? !(value > 0.0) : !(value >= 0.0)) {
    throw DomainError("perturbation '" + spec + "' is out of range");
  }
  return p;
}

std::string perturbation_name(const Perturbation& p) {
  char buf[64];
  switch (p.kind) {
    case PerturbKind::none: return "none";
    case PerturbKind::blur: std::snprintf(buf, sizeof buf, "blur:%g", p.value); break;
    case PerturbKind::noise: std::snprintf(buf, sizeof buf, "noise:%g", p.value); break;
    case PerturbKind::scale: std::snprintf(buf, sizeof buf, "scale:%g", p.value); break;
  }
  return buf;
}

namespace {

// Mirror about the edge pixels (no repeat) until the index lands inside.
std::size_t reflect(long i, long n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return static_cast<std::size_t>(i);
}

void require_image(const Tensor& image, const char* what) {
  if (image.rank() != 3) throw ShapeError(std::string(what) + ": image must be [H,W,C], got " + shape_str(image.shape()));
}

}  // namespace

Tensor gaussian_blur(const Tensor& image, double sigma) {
  require_image(image, "gaussian_blur");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw DomainError("blur sigma must be a finite value >= 0");
  if (sigma == 0.0) return image;
  const long radius = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (long t = -radius; t <= radius; ++t) sum += k[static_cast<std::size_t>(t + radius)] = std::exp(-0.5 * t * t / (sigma * sigma));
  for (double& v : k) v /= sum;

  const long H = static_cast<long>(image.dim(0)), W = static_cast<long>(image.dim(1));
  const std::size_t C = image.dim(2);
  auto at = [&](const Tensor& t, long i, long j, std::size_t c) {
    return t[(static_cast<std::size_t>(i) * static_cast<std::size_t>(W) + static_cast<std::size_t>(j)) * C + c];
  };
  Tensor rows(image.shape()), out(image.shape());
  for (long i = 0; i < H; ++i)
    for (long j = 0; j < W; ++j)
      for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (long t = -radius; t <= radius; ++t) acc += k[static_cast<std::size_t>(t + radius)] * at(image, i, static_cast<long>(reflect(j + t, W)), c);
        rows[(static_cast<std::size_t>(i * W + j)) * C + c] = acc;
      }
  for (long i = 0; i < H; ++i)
    for (long j = 0; j < W; ++j)
      for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (long t = -radius; t <= radius; ++t) acc += k[static_cast<std::size_t>(t + radius)] * at(rows, static_cast<long>(reflect(i + t, H)), j, c);
        out[(static_cast<std::size_t>(i * W + j)) * C + c] = acc;
      }
  return out;
}

Tensor gaussian_noise(const Tensor& image, double sigma, std::uint64_t seed) {
  require_image(image, "gaussian_noise");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw DomainError("noise sigma must be a finite value >= 0");
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Tensor out = image;
  for (double& v : out.vec()) v = std::clamp(v + sigma * noise(rng), 0.0, 1.0);
  return out;
}

Tensor rescale(const Tensor& image, double factor) {
  require_image(image, "rescale");
  if (!(factor > 0.0) || !std::isfinite(factor)) throw DomainError("scale factor must be a finite value > 0");
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  const auto sh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(H) * factor)));
  const auto sw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(W) * factor)));
  // Offset of the original frame inside the resized one (negative: padding).
  const long oy = (static_cast<long>(sh) - static_cast<long>(H)) / 2;
  const long ox = (static_cast<long>(sw) - static_cast<long>(W)) / 2;
  Tensor out(image.shape());
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const long ri = static_cast<long>(i) + oy, rj = static_cast<long>(j) + ox;
      if (ri < 0 || rj < 0 || ri >= static_cast<long>(sh) || rj >= static_cast<long>(sw)) continue;
      const std::size_t si = std::min(H - 1, static_cast<std::size_t>((static_cast<double>(ri) + 0.5) * H / sh));
      const std::size_t sj = std::min(W - 1, static_cast<std::size_t>((static_cast<double>(rj) + 0.5) * W / sw));
      for (std::size_t c = 0; c < C; ++c) out[(i * W + j) * C + c] = image[(si * W + sj) * C + c];
    }
  return out;
}

Tensor perturb(const Tensor& image, const Perturbation& p, std::uint64_t seed) {
  switch (p.kind) {
    case PerturbKind::none: return image;
    case PerturbKind::blur: return gaussian_blur(image, p.value);
    case PerturbKind::noise: return gaussian_noise(image, p.value, seed);
    case PerturbKind::scale: return rescale(image, p.value);
  }
  return image;
}

}  // namespace stsmcd::data
