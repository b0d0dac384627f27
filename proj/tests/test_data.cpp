#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>

#include <unistd.h>

#include "doctest.h"
#include "stsmcd/data.hpp"
#include "stsmcd/errors.hpp"
#include "stsmcd/raster.hpp"
#include "stsmcd/rng.hpp"

using namespace stsmcd;
using namespace stsmcd::data;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("stsmcd_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string bytes_of(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

DatasetInfo info_for(Task task, std::size_t count = 8, std::uint64_t seed = 7) {
  DatasetInfo info;
  info.task = task;
  info.count = count;
  info.seed = seed;
  return info;
}

bool cell_constant(const LabelMap& m) {
  for (std::size_t i = 0; i < m.height; ++i)
    for (std::size_t j = 0; j < m.width; ++j)
      if (m.at(i, j) != m.at(i - i % kCell, j - j % kCell)) return false;
  return true;
}

std::size_t count_of(const LabelMap& m, int v) { return static_cast<std::size_t>(std::count(m.data.begin(), m.data.end(), v)); }

bool same_sample(const Sample& a, const Sample& b) {
  return a.id == b.id && a.t1.vec() == b.t1.vec() && a.t2.vec() == b.t2.vec() && a.change == b.change &&
         a.semantic_t1 == b.semantic_t1 && a.semantic_t2 == b.semantic_t2 && a.loc == b.loc && a.clf == b.clf;
}

}  // namespace

TEST_CASE("raster round trip and format errors") {
  TempDir dir("raster");
  Rng rng(81);
  const Tensor t = uniform_tensor({4, 6, 3}, rng, 0, 1);
  raster::save(dir.path / "a.cmrd", t);
  CHECK(raster::load_tensor(dir.path / "a.cmrd").vec() == t.vec());
  CHECK(raster::load_tensor(dir.path / "a.cmrd").shape() == t.shape());
  CHECK(fs::file_size(dir.path / "a.cmrd") == 4 + 4 + 1 + 4 + 3 * 4 + 72 * 8);

  const LabelMap m(3, 5, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 255});
  raster::save(dir.path / "m.cmrd", m);
  CHECK(raster::load_labels(dir.path / "m.cmrd") == m);
  CHECK_THROWS_AS(raster::load_tensor(dir.path / "m.cmrd"), FormatError);
  CHECK_THROWS_AS(raster::load_labels(dir.path / "a.cmrd"), FormatError);
  CHECK_THROWS_AS(raster::save(dir.path / "bad.cmrd", LabelMap(1, 1, 256)), DomainError);

  std::string b = bytes_of(dir.path / "a.cmrd");
  {
    std::ofstream os(dir.path / "magic.cmrd", std::ios::binary);
    os << "XMRD" << b.substr(4);
  }
  CHECK_THROWS_AS(raster::load_tensor(dir.path / "magic.cmrd"), FormatError);
  {
    std::ofstream os(dir.path / "short.cmrd", std::ios::binary);
    os << b.substr(0, b.size() - 3);
  }
  CHECK_THROWS_WITH_AS(raster::load_tensor(dir.path / "short.cmrd"), doctest::Contains("length"), FormatError);
  {
    std::ofstream os(dir.path / "long.cmrd", std::ios::binary);
    os << b << 'x';
  }
  CHECK_THROWS_AS(raster::load_tensor(dir.path / "long.cmrd"), FormatError);
  CHECK_THROWS_AS(raster::load_tensor(dir.path / "missing.cmrd"), IoError);
}

TEST_CASE("synthesis rejects extents off the 32 grid") {
  DatasetInfo info = info_for(Task::bcd);
  info.height = 60;
  CHECK_THROWS_WITH_AS(synth_generate(info), doctest::Contains("multiple of 32"), DomainError);
  info.height = 64;
  info.width = 0;
  CHECK_THROWS_AS(synth_generate(info), DomainError);
}

TEST_CASE("binary change samples") {
  const Dataset ds = synth_generate(info_for(Task::bcd));
  REQUIRE(ds.samples.size() == 8);
  for (const auto& s : ds.samples) {
    CHECK(s.t1.shape() == Shape{64, 64, 3});
    const double f = foreground_fraction(s, Task::bcd);
    CHECK(f >= kMinFraction);
    CHECK(f <= kMaxFraction);
    CHECK(count_of(s.change, 0) + count_of(s.change, 1) == s.change.size());
    CHECK(cell_constant(s.change));
    for (double v : s.t1.vec()) CHECK((v >= 0.0 && v <= 1.0));
    CHECK(s.semantic_t1.size() == 0);
  }
  CHECK(ds.samples[0].id != ds.samples[1].id);
}

TEST_CASE("semantic change samples") {
  DatasetInfo info = info_for(Task::scd);
  info.semantic_classes = 5;
  const Dataset ds = synth_generate(info);
  for (const auto& s : ds.samples) {
    for (std::size_t i = 0; i < s.change.size(); ++i) {
      const int a = s.semantic_t1.data[i], b = s.semantic_t2.data[i];
      CHECK(s.change.data[i] == (a != b ? 1 : 0));
      if (s.change.data[i]) {
        CHECK((a >= 1 && a <= 5 && b >= 1 && b <= 5));
      } else {
        CHECK((a == 0 && b == 0));
      }
    }
    CHECK(cell_constant(s.semantic_t1));
    const double f = foreground_fraction(s, Task::scd);
    CHECK((f >= kMinFraction && f <= kMaxFraction));
  }
}

TEST_CASE("damage samples") {
  const Dataset ds = synth_generate(info_for(Task::bda));
  for (const auto& s : ds.samples) {
    for (std::size_t i = 0; i < s.loc.size(); ++i) {
      CHECK((s.clf.data[i] > 0) == (s.loc.data[i] == 1));
      CHECK((s.clf.data[i] >= 0 && s.clf.data[i] <= 4));
    }
    for (int level = 1; level <= 4; ++level) CHECK(count_of(s.clf, level) > 0);
    const double f = foreground_fraction(s, Task::bda);
    CHECK((f >= kMinFraction && f <= kMaxFraction));
    CHECK(s.change.size() == 0);
  }
}

TEST_CASE("synthesis is deterministic and independent of worker count") {
  for (Task task : {Task::bcd, Task::scd, Task::bda}) {
    const Dataset a = synth_generate(info_for(task, 5, 3));
    const Dataset b = synth_generate(info_for(task, 5, 3), 3);
    const Dataset c = synth_generate(info_for(task, 5, 4));
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(same_sample(a.samples[i], b.samples[i]));
      CHECK(same_sample(a.samples[i], synth_sample(info_for(task, 5, 3), i)));
    }
    CHECK(a.samples[0].t1.vec() != c.samples[0].t1.vec());
  }
}

TEST_CASE("dataset directories round trip byte for byte") {
  TempDir dir("dataset");
  for (Task task : {Task::bcd, Task::scd, Task::bda}) {
    const Dataset ds = synth_generate(info_for(task, 3, 11));
    const fs::path a = dir.path / (task_name(task) + "_a"), b = dir.path / (task_name(task) + "_b");
    write_dataset(ds, a);
    write_dataset(synth_generate(info_for(task, 3, 11)), b);
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
      if (!entry.is_regular_file()) continue;
      CHECK(bytes_of(entry.path()) == bytes_of(b / fs::relative(entry.path(), a)));
    }
    const Dataset back = read_dataset(a);
    CHECK(back.info.task == task);
    CHECK(back.info.seed == 11);
    REQUIRE(back.samples.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(same_sample(back.samples[i], ds.samples[i]));
  }
  const std::string manifest = bytes_of(dir.path / "scd_a" / "manifest.txt");
  CHECK(manifest.rfind("00000\tT1/00000.cmrd\tT2/00000.cmrd\tGT_BCD/00000.cmrd\tGT_T1/00000.cmrd\tGT_T2/00000.cmrd\n", 0) == 0);
  CHECK(fs::exists(dir.path / "bda_a" / "GT_CLF" / "00002.cmrd"));
  CHECK_THROWS_AS(read_dataset(dir.path / "nope"), IoError);
  fs::remove(dir.path / "bcd_a" / "T2" / "00001.cmrd");
  CHECK_THROWS_AS(read_dataset(dir.path / "bcd_a"), IoError);
}

TEST_CASE("augmentation") {
  const Dataset ds = synth_generate(info_for(Task::scd, 2, 5));
  const Sample& s = ds.samples[0];

  SUBCASE("identity draw leaves the sample unchanged") {
    CHECK(same_sample(augment(s, AugmentDraw{}), s));
  }
  SUBCASE("half turn twice is the identity") {
    const AugmentDraw half{2, false, false};
    CHECK(same_sample(augment(augment(s, half), half), s));
    const AugmentDraw quarter{1, false, false};
    Sample r = s;
    for (int k = 0; k < 4; ++k) r = augment(r, quarter);
    CHECK(same_sample(r, s));
    const AugmentDraw flips{0, true, true};
    CHECK(same_sample(augment(s, flips), augment(s, half)));
  }
  SUBCASE("every draw is a label-preserving bijection") {
    for (int turns = 0; turns < 4; ++turns)
      for (int lr = 0; lr < 2; ++lr)
        for (int tb = 0; tb < 2; ++tb) {
          const AugmentDraw d{turns, lr == 1, tb == 1};
          const Sample a = augment(s, d);
          CHECK(count_of(a.change, 1) == count_of(s.change, 1));
          auto sorted = [](std::vector<double> v) {
            std::sort(v.begin(), v.end());
            return v;
          };
          CHECK(sorted(a.t1.vec()) == sorted(s.t1.vec()));
          // Image and labels move together: a changed pixel keeps its colours.
          for (std::size_t i = 0; i < a.change.height; ++i)
            for (std::size_t j = 0; j < a.change.width; ++j)
              if (a.semantic_t1.at(i, j) != 0) CHECK(a.change.at(i, j) == 1);
        }
  }
  SUBCASE("a quarter turn moves pixels counter-clockwise") {
    const Tensor img({2, 3, 1}, {1, 2, 3, 4, 5, 6});
    CHECK(transform(img, AugmentDraw{1, false, false}).vec() == std::vector<double>{3, 6, 2, 5, 1, 4});
    CHECK(transform(img, AugmentDraw{0, true, false}).vec() == std::vector<double>{3, 2, 1, 6, 5, 4});
    CHECK(transform(img, AugmentDraw{0, false, true}).vec() == std::vector<double>{4, 5, 6, 1, 2, 3});
    CHECK(transform(LabelMap(2, 3, {1, 2, 3, 4, 5, 6}), AugmentDraw{1, false, false}).data ==
          std::vector<int>{3, 6, 2, 5, 1, 4});
  }
  SUBCASE("draws cover every rotation and both flip states") {
    int turns[4] = {0, 0, 0, 0}, lr = 0, tb = 0;
    for (std::uint64_t seed = 0; seed < 400; ++seed) {
      const auto d = draw_augment(seed);
      ++turns[d.quarter_turns];
      lr += d.flip_lr;
      tb += d.flip_tb;
    }
    for (int t : turns) CHECK(t > 60);
    CHECK((lr > 150 && lr < 250));
    CHECK((tb > 150 && tb < 250));
  }
}

TEST_CASE("gaussian blur") {
  Rng rng(82);
  const Tensor img = uniform_tensor({16, 16, 3}, rng, 0, 1);
  CHECK(gaussian_blur(img, 0.0).vec() == img.vec());
  CHECK_THROWS_AS(gaussian_blur(img, -1.0), DomainError);

  for (double sigma : {0.5, 1.0, 2.0}) {
    const Tensor flat = gaussian_blur(Tensor({12, 12, 1}, 0.4), sigma);
    for (double v : flat.vec()) CHECK(std::abs(v - 0.4) <= 1e-12);

    // A symmetric normalized kernel reproduces linear ramps away from borders.
    Tensor ramp({24, 24, 1});
    for (std::size_t i = 0; i < 24; ++i)
      for (std::size_t j = 0; j < 24; ++j) ramp.at({i, j, 0}) = 0.01 * i + 0.02 * j;
    const Tensor r = gaussian_blur(ramp, sigma);
    const std::size_t radius = static_cast<std::size_t>(std::ceil(3 * sigma));
    for (std::size_t i = radius; i < 24 - radius; ++i)
      for (std::size_t j = radius; j < 24 - radius; ++j) CHECK(std::abs(r.at({i, j, 0}) - ramp.at({i, j, 0})) <= 1e-6);

    // Mass of an interior impulse is preserved.
    Tensor impulse({24, 24, 1});
    impulse.at({12, 12, 0}) = 1.0;
    double mass = 0;
    for (double v : gaussian_blur(impulse, sigma).vec()) mass += v;
    CHECK(std::abs(mass - 1.0) <= 1e-12);
  }
  // Radius larger than the image still reflects inside it.
  CHECK(gaussian_blur(Tensor({2, 3, 1}, 0.5), 3.0).all_finite());
}

TEST_CASE("gaussian noise and rescaling") {
  Rng rng(83);
  const Tensor img = uniform_tensor({8, 8, 3}, rng, 0, 1);
  CHECK(gaussian_noise(img, 0.1, 5).vec() == gaussian_noise(img, 0.1, 5).vec());
  CHECK(gaussian_noise(img, 0.1, 5).vec() != gaussian_noise(img, 0.1, 6).vec());
  for (double v : gaussian_noise(img, 2.0, 1).vec()) CHECK((v >= 0.0 && v <= 1.0));
  CHECK(gaussian_noise(img, 0.0, 1).vec() == img.vec());
  CHECK_THROWS_AS(gaussian_noise(img, -0.1, 1), DomainError);

  CHECK(rescale(img, 1.0).vec() == img.vec());
  CHECK_THROWS_AS(rescale(img, 0.0), DomainError);
  // Doubling then centre-cropping shows the middle of the image blown up.
  const Tensor up = rescale(img, 2.0);
  CHECK(up.at({0, 0, 0}) == img.at({2, 2, 0}));
  CHECK(up.at({7, 7, 1}) == img.at({5, 5, 1}));
  // Halving pads a zero border around a subsampled copy.
  const Tensor down = rescale(img, 0.5);
  CHECK(down.at({0, 0, 0}) == 0.0);
  CHECK(down.at({2, 2, 0}) == img.at({1, 1, 0}));
  CHECK(down.at({7, 7, 2}) == 0.0);
}

TEST_CASE("perturbation parsing") {
  CHECK(parse_perturbation("blur:2.0").kind == PerturbKind::blur);
  CHECK(parse_perturbation("noise:0.05").value == 0.05);
  CHECK(parse_perturbation("scale:0.5").kind == PerturbKind::scale);
  CHECK(parse_perturbation("none").kind == PerturbKind::none);
  CHECK(perturbation_name(parse_perturbation("blur:2")) == "blur:2");
  CHECK_THROWS_AS(parse_perturbation("blur"), DomainError);
  CHECK_THROWS_AS(parse_perturbation("blur:x"), DomainError);
  CHECK_THROWS_AS(parse_perturbation("warp:1"), DomainError);
  CHECK_THROWS_AS(parse_perturbation("scale:0"), DomainError);
  CHECK_THROWS_AS(parse_perturbation("noise:-1"), DomainError);
}
