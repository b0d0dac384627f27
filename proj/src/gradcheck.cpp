#include "stsmcd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stsmcd/errors.hpp"
#include "stsmcd/rng.hpp"

namespace stsmcd::gradcheck {

namespace {

double evaluate(const LossBuilder& build) {
  Graph g;
  return build(g).value().item();
}

}  // namespace

Report check(const std::vector<Parameter*>& leaves, const LossBuilder& build, const Options& options) {
  Report report;
  std::vector<Tensor> analytic;
  {
    Graph g;
    Var loss = build(g);
    if (loss.value().size() != 1 || loss.value().rank() != 0) {
      throw ShapeError("grad_check: loss must be a scalar, got " + shape_str(loss.shape()));
    }
    if (auto blocked = g.first_blocking_node()) {
      const auto& n = g.node(*blocked);
      report.skipped = true;
      report.warnings.push_back("node " + std::to_string(*blocked) + " (" + std::string(op_name(n.kind)) +
                                ") is not differentiable; check skipped");
      return report;
    }
    g.backward(loss);
    for (Parameter* p : leaves) {
      const Tensor* grad = nullptr;
      for (auto [q, gq] : g.parameter_grads())
        if (q == p) grad = gq;
      analytic.push_back(grad ? *grad : Tensor(p->value.shape()));
    }
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t l = 0; l < leaves.size(); ++l)
    for (std::size_t i = 0; i < leaves[l]->value.size(); ++i) coords.emplace_back(l, i);
  if (coords.size() > options.samples) {
    Rng rng(options.seed);
    // Partial Fisher-Yates: the first `samples` entries become the sample.
    for (std::size_t k = 0; k < options.samples; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, coords.size() - 1);
      std::swap(coords[k], coords[pick(rng)]);
    }
    coords.resize(options.samples);
    std::sort(coords.begin(), coords.end());
  }

  double total = 0.0;
  for (auto [l, i] : coords) {
    double& v = leaves[l]->value[i];
    const double saved = v;
    v = saved + options.step;
    const double up = evaluate(build);
    v = saved - options.step;
    const double down = evaluate(build);
    v = saved;
    Coordinate c;
    c.leaf = l;
    c.index = i;
    c.analytic = analytic[l][i];
    c.numeric = (up - down) / (2.0 * options.step);
    const double denom = std::max({std::abs(c.analytic), std::abs(c.numeric), options.floor});
    c.rel_error = std::abs(c.analytic - c.numeric) / denom;
    report.max_rel_error = std::max(report.max_rel_error, c.rel_error);
    total += c.rel_error;
    report.coordinates.push_back(c);
  }
  if (!coords.empty()) report.mean_rel_error = total / static_cast<double>(coords.size());
  report.passed = report.max_rel_error <= options.tolerance;
  return report;
}

Var random_projection(Var y, std::uint64_t seed) {
  Rng rng(seed);
  Var w = y.graph->input(uniform_tensor(y.shape(), rng, 0.5, 1.5));
  return reduce_sum(mul(y, w));
}

Var corrupted_silu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] / (1.0 + std::exp(-xv[i]));
  const NodeId in = x.id;
  return x.graph->record(
      OpKind::custom, {in}, std::move(out),
      [in](Graph& g, NodeId self) {
        const Tensor& xv = g.value(in);
        const Tensor& gy = g.grad(self);
        Tensor& gx = g.grad(in);
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += gy[i] / (1.0 + std::exp(-xv[i]));
      },
      "corrupted_silu");
}

}  // namespace stsmcd::gradcheck
