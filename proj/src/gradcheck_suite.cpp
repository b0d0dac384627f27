#include "stsmcd/gradcheck_suite.hpp"

#include <array>
#include <cstdio>
#include <deque>
#include <functional>
#include <ostream>

#include "stsmcd/blocks.hpp"
#include "stsmcd/errors.hpp"
#include "stsmcd/losses.hpp"
#include "stsmcd/models.hpp"
#include "stsmcd/rng.hpp"
#include "stsmcd/scan2d.hpp"
#include "stsmcd/ssm.hpp"

namespace stsmcd::gradcheck {

namespace {

// Owns the free leaves of one check; block and model parameters live in a
// ParamStore and are appended separately.
struct Leaves {
  std::deque<Parameter> owned;
  std::vector<Parameter*> list;
  Rng rng;

  explicit Leaves(std::uint64_t seed) : rng(seed) {}

  Parameter& make(Shape shape, double lo = -1.0, double hi = 1.0) {
    owned.emplace_back("x" + std::to_string(owned.size()), uniform_tensor(std::move(shape), rng, lo, hi));
    list.push_back(&owned.back());
    return owned.back();
  }
  void add_store(ParamStore& store) {
    for (auto& p : store) list.push_back(p.get());
  }
};

// Zero-initialized heads and projections would hide every upstream gradient.
void randomize_zeros(ParamStore& store, Rng& rng) {
  for (auto& p : store) {
    bool all_zero = true;
    for (double v : p->value.vec()) all_zero = all_zero && v == 0.0;
    if (all_zero) p->value = uniform_tensor(p->value.shape(), rng, -0.3, 0.3);
  }
}

LabelMap random_labels(Rng& rng, std::size_t H, std::size_t W, int K) {
  LabelMap y(H, W);
  for (int& v : y.data) v = static_cast<int>(rng() % static_cast<std::uint64_t>(K));
  return y;
}

struct Entry {
  std::string name;
  Scope scope;
  bool expect_pass;
  std::function<Report(const Options&)> run;
};

const char* scope_name(Scope s) {
  switch (s) {
    case Scope::primitives: return "primitive";
    case Scope::blocks: return "block";
    case Scope::models: return "model";
    case Scope::all: return "all";
  }
  return "?";
}

// Unary tensor primitive on an [8, 8] leaf.
Entry unary(std::string name, std::function<Var(Var)> f, double lo = -2.0, double hi = 2.0) {
  return {name, Scope::primitives, true, [f, lo, hi](const Options& o) {
            Leaves l(101);
            auto& x = l.make({8, 8}, lo, hi);
            return check(l.list, [&](Graph& g) { return random_projection(f(g.param(x)), 1); }, o);
          }};
}

std::vector<Entry> primitive_entries() {
  std::vector<Entry> e;
  e.push_back({"matmul", Scope::primitives, true, [](const Options& o) {
                 Leaves l(1);
                 auto& a = l.make({6, 8});
                 auto& b = l.make({8, 5});
                 return check(l.list, [&](Graph& g) { return random_projection(matmul(g.param(a), g.param(b)), 1); },
                              o);
               }});
  e.push_back({"pointwise_conv", Scope::primitives, true, [](const Options& o) {
                 Leaves l(2);
                 auto& x = l.make({4, 4, 4});
                 auto& w = l.make({4, 6});
                 auto& b = l.make({6});
                 return check(
                     l.list,
                     [&](Graph& g) { return random_projection(pointwise_conv(g.param(x), g.param(w), g.param(b)), 2); },
                     o);
               }});
  e.push_back({"depthwise_conv3x3", Scope::primitives, true, [](const Options& o) {
                 Leaves l(3);
                 auto& x = l.make({5, 4, 4});
                 auto& w = l.make({3, 3, 4});
                 auto& b = l.make({4});
                 return check(l.list,
                              [&](Graph& g) {
                                return random_projection(depthwise_conv3x3(g.param(x), g.param(w), g.param(b)), 3);
                              },
                              o);
               }});
  e.push_back({"conv3x3", Scope::primitives, true, [](const Options& o) {
                 Leaves l(4);
                 auto& x = l.make({4, 4, 3});
                 auto& w = l.make({3, 3, 3, 3});
                 auto& b = l.make({3});
                 return check(
                     l.list,
                     [&](Graph& g) { return random_projection(conv3x3(g.param(x), g.param(w), g.param(b)), 4); }, o);
               }});
  e.push_back({"strided_conv", Scope::primitives, true, [](const Options& o) {
                 Leaves l(5);
                 auto& x = l.make({4, 4, 4});
                 auto& w = l.make({2, 2, 4, 4});
                 auto& b = l.make({4});
                 return check(
                     l.list,
                     [&](Graph& g) { return random_projection(strided_conv(g.param(x), g.param(w), g.param(b)), 5); },
                     o);
               }});
  e.push_back({"layer_norm", Scope::primitives, true, [](const Options& o) {
                 Leaves l(6);
                 auto& x = l.make({8, 8}, -2, 2);
                 auto& gm = l.make({8});
                 auto& bt = l.make({8});
                 return check(
                     l.list,
                     [&](Graph& g) { return random_projection(layer_norm(g.param(x), g.param(gm), g.param(bt)), 6); },
                     o);
               }});
  e.push_back(unary("silu", [](Var x) { return silu(x); }, -3, 3));
  e.push_back(unary("softplus", [](Var x) { return softplus(x); }, -3, 3));
  e.push_back(unary("softmax", [](Var x) { return softmax(x); }, -3, 3));
  e.push_back(unary("exp", [](Var x) { return exp(x); }));
  e.push_back(unary("log", [](Var x) { return log(x, 1e-12); }, 0.2, 3.0));
  e.push_back(unary("scale", [](Var x) { return scale(x, -1.7); }));
  e.push_back(unary("reshape", [](Var x) { return reshape(x, {4, 16}); }));
  e.push_back(unary("permute", [](Var x) { return permute(reshape(x, {2, 4, 8}), {2, 0, 1}); }));
  e.push_back(unary("slice", [](Var x) { return slice(x, 1, 2, 7); }));
  e.push_back(unary("upsample_nearest", [](Var x) { return upsample_nearest(reshape(x, {4, 4, 4}), 2); }));
  e.push_back(unary("avg_pool", [](Var x) { return avg_pool(reshape(x, {4, 4, 4}), 2); }));
  e.push_back(unary("reduce_sum", [](Var x) { return reduce_sum(mul(x, x)); }));
  e.push_back(unary("reduce_mean", [](Var x) { return reduce_mean(exp(x)); }));
  e.push_back(unary("gather_rows", [](Var x) { return gather_rows(x, {7, 0, 0, 3, 5, 1, 2, 4, 6}); }));
  e.push_back(unary("scatter_rows", [](Var x) { return scatter_rows(x, {1, 9, 1, 3, 0, 4, 6, 8}, 10); }));
  e.push_back(unary("pick", [](Var x) {
    static const std::vector<int> labels{2, 0, 255, 7, 5, 1, 3, 6};
    return pick(x, labels, 255);
  }));

  auto binary = [](std::string name, std::function<Var(Var, Var)> f) {
    return Entry{name, Scope::primitives, true, [f](const Options& o) {
                   Leaves l(7);
                   auto& a = l.make({6, 6});
                   auto& b = l.make({6, 6});
                   return check(l.list, [&](Graph& g) { return random_projection(f(g.param(a), g.param(b)), 7); },
                                o);
                 }};
  };
  e.push_back(binary("add", [](Var a, Var b) { return add(a, b); }));
  e.push_back(binary("sub", [](Var a, Var b) { return sub(a, b); }));
  e.push_back(binary("mul", [](Var a, Var b) { return mul(a, b); }));
  e.push_back(binary("add_n", [](Var a, Var b) {
    const std::array<Var, 3> xs{a, b, a};
    return add_n(xs);
  }));
  e.push_back(binary("concat", [](Var a, Var b) {
    const std::array<Var, 2> xs{a, b};
    return concat(xs, 1);
  }));

  for (auto mode : {ssm::Discretization::euler_b, ssm::Discretization::exact_zoh}) {
    const std::string name = std::string("selective_scan/") + (mode == ssm::Discretization::euler_b ? "euler_b" : "exact_zoh");
    e.push_back({name, Scope::primitives, true, [mode](const Options& o) {
                   Leaves l(8);
                   const std::size_t L = 8, D = 3, N = 3;
                   auto& u = l.make({L, D});
                   auto& dt = l.make({L, D}, -2, 1);
                   auto& a_log = l.make({D, N});
                   auto& B = l.make({L, N});
                   auto& C = l.make({L, N});
                   auto& Dk = l.make({D});
                   return check(l.list,
                                [&](Graph& g) {
                                  Var A = scale(exp(g.param(a_log)), -1.0);
                                  return random_projection(ssm::selective_scan(g.param(u), softplus(g.param(dt)), A,
                                                                               g.param(B), g.param(C), g.param(Dk),
                                                                               mode),
                                                           8);
                                },
                                o);
                 }});
  }
  e.push_back({"cross_entropy", Scope::primitives, true, [](const Options& o) {
                 Leaves l(9);
                 auto& x = l.make({4, 4, 5}, -2, 2);
                 const LabelMap y = random_labels(l.rng, 4, 4, 5);
                 return check(l.list, [&](Graph& g) { return losses::cross_entropy(softmax(g.param(x)), y); }, o);
               }});
  e.push_back({"lovasz_softmax", Scope::primitives, true, [](const Options& o) {
                 Leaves l(10);
                 auto& x = l.make({4, 4, 5}, -2, 2);
                 const LabelMap y = random_labels(l.rng, 4, 4, 5);
                 return check(l.list, [&](Graph& g) { return losses::lovasz_softmax(softmax(g.param(x)), y); }, o);
               }});
  e.push_back({"corrupted_silu (control)", Scope::primitives, false, [](const Options& o) {
                 Leaves l(11);
                 auto& x = l.make({8, 8}, -3, 3);
                 return check(l.list, [&](Graph& g) { return random_projection(corrupted_silu(g.param(x)), 11); }, o);
               }});
  return e;
}

blocks::VssConfig small_vss(blocks::GateMode mode) {
  blocks::VssConfig c;
  c.gate_mode = mode;
  c.ss2d.state_size = 2;
  return c;
}

std::vector<Entry> block_entries() {
  std::vector<Entry> e;
  e.push_back({"ss2d", Scope::blocks, true, [](const Options& o) {
                 Leaves l(21);
                 ParamStore store;
                 auto p = scan2d::make_ss2d(store, "ss2d", 4, {2, ssm::Discretization::euler_b, true}, l.rng);
                 auto& x = l.make({3, 3, 4});
                 l.add_store(store);
                 return check(l.list, [&](Graph& g) { return random_projection(scan2d::ss2d_forward(g.param(x), p), 21); },
                              o);
               }});
  for (auto mode : {blocks::GateMode::sum, blocks::GateMode::multiply}) {
    const std::string name = std::string("vss_block/") + (mode == blocks::GateMode::sum ? "sum" : "multiply");
    e.push_back({name, Scope::blocks, true, [mode](const Options& o) {
                   Leaves l(22);
                   ParamStore store;
                   auto p = blocks::make_vss_block(store, "vss", 4, small_vss(mode), l.rng);
                   randomize_zeros(store, l.rng);
                   auto& x = l.make({4, 4, 4});
                   l.add_store(store);
                   return check(l.list, [&](Graph& g) { return random_projection(blocks::vss_block(g.param(x), p), 22); },
                                o);
                 }});
  }
  e.push_back({"stss_block", Scope::blocks, true, [](const Options& o) {
                 Leaves l(23);
                 ParamStore store;
                 auto p = blocks::make_stss_block(store, "stss", 4, small_vss(blocks::GateMode::sum), l.rng);
                 randomize_zeros(store, l.rng);
                 auto& f1 = l.make({4, 4, 4});
                 auto& f2 = l.make({4, 4, 4});
                 l.add_store(store);
                 return check(
                     l.list,
                     [&](Graph& g) { return random_projection(blocks::stss_block(g.param(f1), g.param(f2), p), 23); }, o);
               }});
  e.push_back({"fuse_levels", Scope::blocks, true, [](const Options& o) {
                 Leaves l(24);
                 ParamStore store;
                 auto p = blocks::make_fuse(store, "fuse", 4, 6, l.rng);
                 randomize_zeros(store, l.rng);
                 auto& high = l.make({4, 4, 4});
                 auto& low = l.make({4, 4, 6});
                 l.add_store(store);
                 return check(
                     l.list,
                     [&](Graph& g) { return random_projection(blocks::fuse_levels(g.param(high), g.param(low), p), 24); },
                     o);
               }});
  e.push_back({"patch_embed+merge", Scope::blocks, true, [](const Options& o) {
                 Leaves l(25);
                 ParamStore store;
                 auto models_cfg = models::make_config(models::Variant::micro);
                 auto enc = models::make_encoder(store, "enc", models_cfg, l.rng);
                 auto& img = l.make({8, 8, 3}, 0, 1);
                 l.add_store(store);
                 return check(l.list,
                              [&](Graph& g) {
                                Var f = blocks::patch_embed(g.param(img), enc.embed);
                                return random_projection(blocks::patch_merge(f, enc.merges[0]), 25);
                              },
                              o);
               }});
  return e;
}

std::vector<Entry> model_entries() {
  std::vector<Entry> e;
  for (Task task : {Task::bcd, Task::scd, Task::bda}) {
    e.push_back({"model/" + task_name(task), Scope::models, true, [task](const Options& o) {
                   // 32x32 is the smallest extent the encoder accepts.
                   const std::size_t S = models::kInputMultiple;
                   Rng rng(67);
                   models::Model m(task, models::make_config(models::Variant::micro), 13);
                   randomize_zeros(m.params(), rng);
                   const Tensor x1 = uniform_tensor({S, S, 3}, rng, 0, 1), x2 = uniform_tensor({S, S, 3}, rng, 0, 1);
                   const LabelMap yc = random_labels(rng, S, S, static_cast<int>(m.change_classes()));
                   const int K = static_cast<int>(m.config().semantic_classes) + 1;
                   const LabelMap y1 = random_labels(rng, S, S, K), y2 = random_labels(rng, S, S, K);
                   const LabelMap yloc = random_labels(rng, S, S, 2);
                   std::vector<Parameter*> leaves;
                   for (auto& p : m.params()) leaves.push_back(p.get());
                   return check(leaves,
                                [&](Graph& g) {
                                  const auto p = m.predict(g.input(x1), g.input(x2));
                                  switch (task) {
                                    case Task::bcd: return losses::bcd_loss(p.change, yc);
                                    case Task::scd:
                                      return losses::scd_loss(*p.semantic_t1, *p.semantic_t2, p.change, y1, y2, yc);
                                    case Task::bda: return losses::bda_loss(*p.semantic_t1, p.change, yloc, yc);
                                  }
                                  return Var{};
                                },
                                o);
                 }});
  }
  return e;
}

}  // namespace

Scope parse_scope(const std::string& name) {
  if (name == "primitives") return Scope::primitives;
  if (name == "blocks") return Scope::blocks;
  if (name == "models") return Scope::models;
  if (name == "all") return Scope::all;
  throw DomainError("unknown gradcheck scope '" + name + "' (primitives, blocks, models, all)");
}

std::vector<SuiteResult> run_suite(Scope scope, const Options& base) {
  std::vector<Entry> entries;
  auto take = [&](Scope s, std::vector<Entry> more) {
    if (scope == Scope::all || scope == s) entries.insert(entries.end(), more.begin(), more.end());
  };
  take(Scope::primitives, primitive_entries());
  take(Scope::blocks, block_entries());
  take(Scope::models, model_entries());

  std::vector<SuiteResult> out;
  for (const auto& e : entries) out.push_back({e.name, scope_name(e.scope), e.expect_pass, e.run(base)});
  return out;
}

void write_table(std::ostream& os, const std::vector<SuiteResult>& rows) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-28s %-10s %6s %12s %12s  %s\n", "check", "scope", "coords", "max_rel", "mean_rel",
                "result");
  os << buf;
  for (const auto& r : rows) {
    const char* verdict = r.report.skipped ? "SKIP" : r.ok() ? (r.expect_pass ? "PASS" : "REJECTED") : "FAIL";
    std::snprintf(buf, sizeof buf, "%-28s %-10s %6zu %12.3e %12.3e  %s\n", r.name.c_str(), r.scope.c_str(),
                  r.report.coordinates.size(), r.report.max_rel_error, r.report.mean_rel_error, verdict);
    os << buf;
  }
}

}  // namespace stsmcd::gradcheck
