#include "stsmcd/losses.hpp"

#include <algorithm>
#include <array>
#include <memory>
#include <numeric>
#include <vector>

#include "stsmcd/errors.hpp"

namespace stsmcd::losses {

namespace {

// Flattened [M, K] view of probabilities plus validated labels.
struct PixelView {
  std::size_t pixels = 0;
  std::size_t classes = 0;
};

PixelView check_inputs(Var probs, const LabelMap& labels, int ignore, const char* what) {
  const Shape& s = probs.shape();
  if (s.size() != 3 || s[0] != labels.height || s[1] != labels.width) {
    throw ShapeError(std::string(what) + ": probabilities " + shape_str(s) + " do not match labels " +
                     std::to_string(labels.height) + "x" + std::to_string(labels.width));
  }
  const int K = static_cast<int>(s[2]);
  for (int y : labels.data) {
    if (y != ignore && (y < 0 || y >= K)) {
      throw DomainError(std::string(what) + ": label " + std::to_string(y) + " outside [0," + std::to_string(K) + ")");
    }
  }
  return {s[0] * s[1], s[2]};
}

}  // namespace

Var cross_entropy(Var probs, const LabelMap& labels, int ignore) {
  const PixelView v = check_inputs(probs, labels, ignore, "cross_entropy");
  const bool any = std::any_of(labels.data.begin(), labels.data.end(), [&](int y) { return y != ignore; });
  if (!any) throw DomainError("cross_entropy: every pixel is ignored");
  Var flat = reshape(probs, {v.pixels, v.classes});
  Var picked = pick(flat, labels.data, ignore);
  return scale(reduce_mean(log(picked, kLogClamp)), -1.0);
}

Var lovasz_softmax(Var probs, const LabelMap& labels, int ignore) {
  const PixelView v = check_inputs(probs, labels, ignore, "lovasz_softmax");
  const std::size_t M = v.pixels, K = v.classes;
  const Tensor& p = probs.value();

  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < M; ++i)
    if (labels.data[i] != ignore) valid.push_back(i);
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < K; ++c) {
    const int ci = static_cast<int>(c);
    if (std::any_of(valid.begin(), valid.end(), [&](std::size_t i) { return labels.data[i] == ci; })) present.push_back(c);
  }
  if (present.empty()) throw DomainError("lovasz_softmax: no class is present in the labels");

  // Per present class: d(loss_c)/d(p_ic) for every valid pixel.
  auto weights = std::make_shared<std::vector<std::pair<std::size_t, double>>>();
  const double inv_classes = 1.0 / static_cast<double>(present.size());
  double total = 0.0;
  const std::size_t n = valid.size();
  std::vector<double> err(n);
  std::vector<std::size_t> order(n);
  for (std::size_t c : present) {
    const int ci = static_cast<int>(c);
    double gts = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = valid[k];
      const bool fg = labels.data[i] == ci;
      gts += fg ? 1.0 : 0.0;
      err[k] = fg ? 1.0 - p[i * K + c] : p[i * K + c];
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return err[a] > err[b]; });
    double cum_fg = 0.0, prev_jac = 0.0, loss_c = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t k = order[r];
      const std::size_t i = valid[k];
      const bool fg = labels.data[i] == ci;
      cum_fg += fg ? 1.0 : 0.0;
      const double inter = gts - cum_fg;
      const double uni = gts + static_cast<double>(r + 1) - cum_fg;
      const double jac = 1.0 - inter / uni;
      const double g = jac - prev_jac;
      prev_jac = jac;
      loss_c += err[k] * g;
      if (g != 0.0) weights->emplace_back(i * K + c, (fg ? -g : g) * inv_classes);
    }
    total += loss_c;
  }

  const NodeId pi = probs.id;
  return probs.graph->record(
      OpKind::lovasz_softmax, {pi}, Tensor::scalar(total * inv_classes),
      [pi, weights](Graph& g, NodeId self) {
        if (!g.requires_grad(pi)) return;
        const double gy = (*g.grad_if(self))[0];
        Tensor& gp = g.grad(pi);
        for (auto [idx, w] : *weights) gp[idx] += gy * w;
      },
      "lovasz_softmax");
}

Var bcd_loss(Var p_change, const LabelMap& y_change) {
  return cross_entropy(p_change, y_change) + lovasz_softmax(p_change, y_change);
}

Var scd_loss(Var p_t1, Var p_t2, Var p_change, const LabelMap& y_t1, const LabelMap& y_t2, const LabelMap& y_change) {
  const std::array<Var, 4> semantic{cross_entropy(p_t1, y_t1), cross_entropy(p_t2, y_t2), lovasz_softmax(p_t1, y_t1),
                                    lovasz_softmax(p_t2, y_t2)};
  return bcd_loss(p_change, y_change) + scale(add_n(semantic), 0.5);
}

Var bda_loss(Var p_loc, Var p_clf, const LabelMap& y_loc, const LabelMap& y_clf) {
  return bcd_loss(p_loc, y_loc) + bcd_loss(p_clf, y_clf);
}

}  // namespace stsmcd::losses
