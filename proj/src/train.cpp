#include "stsmcd/train.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "stsmcd/errors.hpp"
#include "stsmcd/losses.hpp"
#include "stsmcd/raster.hpp"
#include "stsmcd/rng.hpp"

namespace stsmcd::train {

AdamW::AdamW(const ParamStore& store, AdamWOptions opt) : opt_(opt) {
  if (!(opt.lr >= 0.0) || !(opt.weight_decay >= 0.0) || !(opt.eps > 0.0) || !(opt.beta1 >= 0.0 && opt.beta1 < 1.0) ||
      !(opt.beta2 >= 0.0 && opt.beta2 < 1.0)) {
    throw DomainError("optimizer options out of range");
  }
  for (const auto& p : store) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void AdamW::step(ParamStore& store) {
  if (store.size() != m_.size()) throw ShapeError("optimizer was built for a different parameter set");
  ++t_;
  const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  const double decay = 1.0 - opt_.lr * opt_.weight_decay;
  for (std::size_t k = 0; k < store.size(); ++k) {
    Parameter& p = store[k];
    double* w = p.value.vec().data();
    const double* g = p.grad.vec().data();
    double* m = m_[k].vec().data();
    double* v = v_[k].vec().data();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
      v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
      w[i] = w[i] * decay - opt_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
    }
  }
}

Var task_loss(const models::Probabilities& p, const data::Sample& s, Task task) {
  switch (task) {
    case Task::bcd: return losses::bcd_loss(p.change, s.change);
    case Task::scd:
      return losses::scd_loss(*p.semantic_t1, *p.semantic_t2, p.change, s.semantic_t1, s.semantic_t2, s.change);
    case Task::bda: return losses::bda_loss(*p.semantic_t1, p.change, s.loc, s.clf);
  }
  throw DomainError("unknown task");
}

namespace {

void check_compatible(const models::Model& model, const data::Dataset& ds) {
  if (ds.info.task != model.task()) {
    throw DomainError("dataset task " + task_name(ds.info.task) + " does not match model task " +
                      task_name(model.task()));
  }
  if (ds.samples.empty()) throw DomainError("dataset is empty");
  if (model.task() == Task::scd && ds.info.semantic_classes != model.config().semantic_classes) {
    throw DomainError("dataset has " + std::to_string(ds.info.semantic_classes) + " land-cover classes, model expects " +
                      std::to_string(model.config().semantic_classes));
  }
  if (model.task() == Task::bda && ds.info.damage_levels != model.config().damage_classes) {
    throw DomainError("dataset has " + std::to_string(ds.info.damage_levels) + " damage levels, model expects " +
                      std::to_string(model.config().damage_classes));
  }
}

struct SampleGrad {
  double loss = 0.0;
  std::vector<Tensor> grads;  // aligned with the store order
};

SampleGrad sample_gradient(const models::Model& model, const data::Sample& s, const ParamStore& store) {
  Graph g;
  const auto probs = model.predict(g.input(s.t1), g.input(s.t2));
  const Var loss = task_loss(probs, s, model.task());
  SampleGrad out;
  out.loss = loss.value().item();
  if (!std::isfinite(out.loss)) return out;
  g.backward(loss);
  std::unordered_map<const Parameter*, const Tensor*> by_param;
  for (const auto& [p, grad] : g.parameter_grads()) by_param[p] = grad;
  out.grads.reserve(store.size());
  for (const auto& p : store) {
    const auto it = by_param.find(p.get());
    out.grads.push_back(it != by_param.end() && it->second ? *it->second : Tensor(p->value.shape()));
  }
  return out;
}

}  // namespace

std::vector<double> train(models::Model& model, const data::Dataset& ds, const TrainOptions& opt,
                          const std::function<void(const StepReport&)>& on_step) {
  check_compatible(model, ds);
  if (opt.batch == 0) throw DomainError("batch size must be positive");
  ParamStore& store = model.params();
  AdamW optim(store, opt.optim);
  Rng order_rng(mix_seed(opt.seed, 0x5eedULL));
  std::vector<std::size_t> order(ds.samples.size());
  std::size_t cursor = order.size();
  const unsigned workers = std::max(1u, std::min<unsigned>(opt.workers, static_cast<unsigned>(opt.batch)));

  std::vector<double> losses;
  losses.reserve(opt.iterations);
  for (std::size_t it = 1; it <= opt.iterations; ++it) {
    std::vector<data::Sample> batch;
    for (std::size_t slot = 0; slot < opt.batch; ++slot) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      const data::Sample& s = ds.samples[order[cursor++]];
      batch.push_back(opt.augment ? data::augment(s, mix_seed(opt.seed, it * opt.batch + slot)) : s);
    }

    std::vector<SampleGrad> results(batch.size());
    auto run = [&](unsigned w) {
      for (std::size_t k = w; k < batch.size(); k += workers) results[k] = sample_gradient(model, batch[k], store);
    };
    if (workers == 1) {
      run(0);
    } else {
      std::vector<std::thread> pool;
      for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run, w);
      for (auto& t : pool) t.join();
    }

    // Ordered reduction.
    store.zero_grad();
    const double inv = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (std::size_t k = 0; k < results.size(); ++k) {
      if (!std::isfinite(results[k].loss)) {
        throw NumericFault("non-finite loss at iteration " + std::to_string(it) + " on sample " + batch[k].id);
      }
      loss += results[k].loss;
      for (std::size_t p = 0; p < store.size(); ++p) {
        double* g = store[p].grad.vec().data();
        const double* s = results[k].grads[p].vec().data();
        for (std::size_t i = 0; i < store[p].grad.size(); ++i) g[i] += inv * s[i];
      }
    }
    loss *= inv;
    optim.step(store);
    losses.push_back(loss);
    if (on_step) on_step({it, loss});
  }
  return losses;
}

// ---------------------------------------------------------------------------

namespace {

// Argmax over classes [first, K) of a [H, W, K] tensor; lowest index on ties.
LabelMap argmax_from(const Tensor& scores, std::size_t first) {
  const std::size_t H = scores.dim(0), W = scores.dim(1), K = scores.dim(2);
  LabelMap out(H, W);
  for (std::size_t i = 0; i < H * W; ++i) {
    std::size_t best = first;
    for (std::size_t k = first + 1; k < K; ++k)
      if (scores[i * K + k] > scores[i * K + best]) best = k;
    out.data[i] = static_cast<int>(best);
  }
  return out;
}

LabelMap gated(const LabelMap& classes, const LabelMap& gate) {
  LabelMap out = classes;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (gate.data[i] != 1) out.data[i] = 0;
  return out;
}

}  // namespace

Prediction predict(const models::Model& model, const Tensor& t1, const Tensor& t2) {
  Graph g;
  const auto p = model.predict(g.input(t1), g.input(t2));
  Prediction out;
  switch (model.task()) {
    case Task::bcd: out.change = models::argmax_map(p.change.value()); break;
    case Task::scd:
      out.change = models::argmax_map(p.change.value());
      out.semantic_t1 = gated(argmax_from(p.semantic_t1->value(), 1), out.change);
      out.semantic_t2 = gated(argmax_from(p.semantic_t2->value(), 1), out.change);
      break;
    case Task::bda:
      out.loc = models::argmax_map(p.semantic_t1->value());
      out.clf = gated(argmax_from(p.change.value(), 1), out.loc);
      break;
  }
  return out;
}

Evaluation evaluate(const models::Model& model, const data::Dataset& ds, const data::Perturbation& perturb,
                    std::uint64_t seed) {
  check_compatible(model, ds);
  Evaluation ev;
  metrics::BinaryConfusion bcd;
  metrics::SemanticConfusion scd(model.config().semantic_classes);
  metrics::BdaConfusion bda;
  bda.levels.assign(model.config().damage_classes, {});

  for (std::size_t k = 0; k < ds.samples.size(); ++k) {
    const data::Sample& s = ds.samples[k];
    const Tensor t1 = data::perturb(s.t1, perturb, mix_seed(seed, 2 * k));
    const Tensor t2 = data::perturb(s.t2, perturb, mix_seed(seed, 2 * k + 1));
    Prediction pr = predict(model, t1, t2);
    pr.id = s.id;
    switch (model.task()) {
      case Task::bcd: bcd += metrics::binary_confusion(s.change, pr.change); break;
      case Task::scd:
        bcd += metrics::binary_confusion(s.change, pr.change);
        scd.add(s.semantic_t1, pr.semantic_t1);
        scd.add(s.semantic_t2, pr.semantic_t2);
        break;
      case Task::bda: {
        const auto c = metrics::bda_confusion(s.loc, pr.loc, s.clf, pr.clf, model.config().damage_classes);
        bda.loc += c.loc;
        for (std::size_t l = 0; l < c.levels.size(); ++l) bda.levels[l] += c.levels[l];
        break;
      }
    }
    ev.predictions.push_back(std::move(pr));
  }
  switch (model.task()) {
    case Task::bcd: metrics::append(ev.report, metrics::bcd_metrics(bcd)); break;
    case Task::scd:
      metrics::append(ev.report, metrics::bcd_metrics(bcd));
      metrics::append(ev.report, metrics::scd_metrics(scd));
      break;
    case Task::bda: metrics::append(ev.report, metrics::bda_metrics(bda)); break;
  }
  return ev;
}

void write_predictions(const Evaluation& ev, Task task, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::vector<std::pair<const char*, LabelMap Prediction::*>> maps;
  switch (task) {
    case Task::bcd: maps = {{"PRED_BCD", &Prediction::change}}; break;
    case Task::scd:
      maps = {{"PRED_BCD", &Prediction::change}, {"PRED_T1", &Prediction::semantic_t1}, {"PRED_T2", &Prediction::semantic_t2}};
      break;
    case Task::bda: maps = {{"PRED_LOC", &Prediction::loc}, {"PRED_CLF", &Prediction::clf}}; break;
  }
  for (const auto& [name, field] : maps) {
    std::error_code ec;
    fs::create_directories(dir / name, ec);
    if (ec) throw IoError("cannot create " + (dir / name).string() + ": " + ec.message());
    for (const auto& p : ev.predictions) raster::save(dir / name / (p.id + ".cmrd"), p.*field);
  }
}

// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <std::size_t N>
std::string join(const std::array<std::size_t, N>& a) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + std::to_string(a[i]);
  return s;
}

template <std::size_t N>
std::array<std::size_t, N> split_sizes(const std::string& key, const std::string& v) {
  std::array<std::size_t, N> out{};
  std::istringstream is(v);
  std::string item;
  std::size_t n = 0;
  while (std::getline(is, item, ',')) {
    if (n == N) break;
    try {
      out[n++] = std::stoul(item);
    } catch (const std::exception&) {
      throw FormatError(key + ": bad entry '" + item + "'");
    }
  }
  if (n != N || std::getline(is, item)) throw FormatError(key + " needs " + std::to_string(N) + " comma-separated values");
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const auto r = std::stoull(v, &used);
    if (used == v.size()) return r;
  } catch (const std::exception&) {
  }
  throw FormatError(key + ": expected an unsigned integer, got '" + v + "'");
}

}  // namespace

std::vector<std::pair<std::string, std::string>> read_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

void write_run_config(const RunConfig& rc, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  const auto& m = rc.model;
  os << "task = " << task_name(rc.task) << '\n'
     << "variant = " << models::variant_name(m.variant) << '\n'
     << "depths = " << join(m.depths) << '\n'
     << "channels = " << join(m.channels) << '\n'
     << "state_size = " << m.state_size << '\n'
     << "gate_mode = " << (m.gate_mode == blocks::GateMode::sum ? "sum" : "multiply") << '\n'
     << "discretization = " << (m.discretization == ssm::Discretization::euler_b ? "euler_b" : "exact_zoh") << '\n'
     << "semantic_classes = " << m.semantic_classes << '\n'
     << "damage_classes = " << m.damage_classes << '\n'
     << "seed = " << rc.seed << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

RunConfig read_run_config(const std::filesystem::path& path) {
  RunConfig rc;
  const auto kv = read_config_file(path);
  // Variant first so explicit overrides below win.
  for (const auto& [k, v] : kv)
    if (k == "variant") rc.model = models::make_config(models::parse_variant(v));
  for (const auto& [k, v] : kv) {
    if (k == "task") rc.task = parse_task(v);
    else if (k == "variant") continue;
    else if (k == "depths") rc.model.depths = split_sizes<4>(k, v);
    else if (k == "channels") rc.model.channels = split_sizes<4>(k, v);
    else if (k == "state_size") rc.model.state_size = to_size(k, v);
    else if (k == "gate_mode") {
      if (v != "sum" && v != "multiply") throw FormatError("gate_mode must be sum or multiply");
      rc.model.gate_mode = v == "sum" ? blocks::GateMode::sum : blocks::GateMode::multiply;
    } else if (k == "discretization") {
      if (v != "euler_b" && v != "exact_zoh") throw FormatError("discretization must be euler_b or exact_zoh");
      rc.model.discretization = v == "euler_b" ? ssm::Discretization::euler_b : ssm::Discretization::exact_zoh;
    } else if (k == "semantic_classes") rc.model.semantic_classes = to_size(k, v);
    else if (k == "damage_classes") rc.model.damage_classes = to_size(k, v);
    else if (k == "seed") rc.seed = to_size(k, v);
    else throw FormatError(path.string() + ": unknown key '" + k + "'");
  }
  return rc;
}

}  // namespace stsmcd::train
