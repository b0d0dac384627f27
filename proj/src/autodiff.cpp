#include "stsmcd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "stsmcd/errors.hpp"

namespace stsmcd {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::input: return "input";
    case OpKind::parameter: return "parameter";
    case OpKind::matmul: return "matmul";
    case OpKind::pointwise_conv: return "pointwise_conv";
    case OpKind::depthwise_conv3x3: return "depthwise_conv3x3";
    case OpKind::conv3x3: return "conv3x3";
    case OpKind::strided_conv: return "strided_conv";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::silu: return "silu";
    case OpKind::softplus: return "softplus";
    case OpKind::softmax: return "softmax";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::reshape: return "reshape";
    case OpKind::permute: return "permute";
    case OpKind::upsample_nearest: return "upsample_nearest";
    case OpKind::avg_pool: return "avg_pool";
    case OpKind::reduce_sum: return "reduce_sum";
    case OpKind::reduce_mean: return "reduce_mean";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::scatter_rows: return "scatter_rows";
    case OpKind::pick: return "pick";
    case OpKind::argmax: return "argmax";
    case OpKind::selective_scan: return "selective_scan";
    case OpKind::lovasz_softmax: return "lovasz_softmax";
    case OpKind::custom: return "custom";
  }
  return "unknown";
}

const Tensor& Var::value() const { return graph->value(id); }

// ---------------------------------------------------------------------------
// Graph

Var Graph::input(Tensor value, bool requires_grad) {
  Node n;
  n.kind = OpKind::input;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Graph::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
  Node n;
  n.kind = OpKind::parameter;
  n.label = p.name;
  n.param = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  const NodeId id = nodes_.size() - 1;
  param_nodes_.emplace(&p, id);
  param_order_.push_back(id);
  return Var{this, id};
}

Var Graph::record(OpKind kind, std::vector<NodeId> inputs, Tensor value, BackwardFn backward, std::string label) {
  const NodeId id = nodes_.size();
  for (NodeId in : inputs) {
    if (in >= id) throw ShapeError("node " + std::to_string(id) + " consumes undefined node " + std::to_string(in));
  }
  if (!value.all_finite()) {
    throw NumericFault("node " + std::to_string(id) + " (" + std::string(op_name(kind)) +
                       ") produced non-finite values");
  }
  Node n;
  n.kind = kind;
  n.label = std::move(label);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](NodeId in) { return nodes_[in].requires_grad; });
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, id};
}

Var Graph::record_nondiff(OpKind kind, std::vector<NodeId> inputs, Tensor value) {
  const NodeId id = nodes_.size();
  Node n;
  n.kind = kind;
  n.differentiable = false;
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, id};
}

const Tensor& Graph::value(NodeId id) const {
  const Node& n = nodes_.at(id);
  return n.param ? n.param->value : n.value;
}

Tensor& Graph::grad(NodeId id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(value(id).shape());
    n.has_grad = true;
  }
  return n.grad;
}

const Tensor* Graph::grad_if(NodeId id) const {
  const Node& n = nodes_.at(id);
  return n.has_grad ? &n.grad : nullptr;
}

void Graph::backward(Var seed, const Tensor& cotangent) {
  if (seed.graph != this || seed.id >= nodes_.size()) {
    throw ShapeError("backward seed is not a node of this graph");
  }
  if (cotangent.shape() != value(seed.id).shape()) {
    throw ShapeError("cotangent shape " + shape_str(cotangent.shape()) + " does not match seed node " +
                     std::to_string(seed.id) + " shape " + shape_str(value(seed.id).shape()));
  }
  for (Node& n : nodes_) {
    if (n.kind != OpKind::input && n.kind != OpKind::parameter) {
      n.has_grad = false;
      n.grad = Tensor();
    }
  }
  if (!nodes_[seed.id].requires_grad) return;
  Tensor& g = grad(seed.id);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += cotangent[i];
  for (NodeId id = seed.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, id);
  }
}

void Graph::backward(Var seed) {
  const Tensor& v = value(seed.id);
  if (v.size() != 1) throw ShapeError("backward without cotangent requires a scalar seed, got " + shape_str(v.shape()));
  backward(seed, Tensor(v.shape(), 1.0));
}

std::vector<std::pair<Parameter*, const Tensor*>> Graph::parameter_grads() const {
  std::vector<std::pair<Parameter*, const Tensor*>> out;
  out.reserve(param_order_.size());
  for (NodeId id : param_order_) out.emplace_back(nodes_[id].param, grad_if(id));
  return out;
}

void Graph::accumulate_parameter_grads(double scale) const {
  for (auto [p, g] : parameter_grads()) {
    if (!g) continue;
    for (std::size_t i = 0; i < g->size(); ++i) p->grad[i] += scale * (*g)[i];
  }
}

std::optional<NodeId> Graph::first_blocking_node() const {
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.differentiable) continue;
    for (NodeId in : n.inputs) {
      if (nodes_[in].requires_grad) return id;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

void require_same_graph(Var a, Var b) {
  if (a.graph != b.graph) throw ShapeError("operands belong to different graphs");
}

std::string node_desc(Var v) { return "node " + std::to_string(v.id) + " " + shape_str(v.shape()); }

void require_same_shape(Var a, Var b, std::string_view op) {
  require_same_graph(a, b);
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch between " + node_desc(a) + " and " + node_desc(b));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <class F>
Var unary(Var x, OpKind kind, F&& fwd_and_deriv) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  auto deriv = std::make_shared<std::vector<double>>(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    auto [v, d] = fwd_and_deriv(xv[i]);
    y[i] = v;
    (*deriv)[i] = d;
  }
  const NodeId xi = x.id;
  return x.graph->record(kind, {xi}, std::move(y), [xi, deriv](Graph& g, NodeId self) {
    if (!g.requires_grad(xi)) return;
    const Tensor& gy = *g.grad_if(self);
    Tensor& gx = g.grad(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * (*deriv)[i];
  });
}

// Splits a shape around `axis` into (outer, dim, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, dim = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.dim = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

void require_bias(std::optional<Var> bias, Var x, std::size_t channels, std::string_view op) {
  if (!bias) return;
  require_same_graph(*bias, x);
  require(bias->shape() == Shape{channels},
          std::string(op) + ": bias " + node_desc(*bias) + " must have shape [" + std::to_string(channels) + "]");
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  require_same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
          "matmul: incompatible " + node_desc(a) + " and " + node_desc(b));
  const std::size_t M = av.dim(0), K = av.dim(1), N = bv.dim(1);
  Tensor y({M, N});
  for (std::size_t i = 0; i < M; ++i) {
    double* yr = &y[i * N];
    for (std::size_t k = 0; k < K; ++k) {
      const double aik = av[i * K + k];
      const double* br = &bv[k * N];
      for (std::size_t j = 0; j < N; ++j) yr[j] += aik * br[j];
    }
  }
  const NodeId ai = a.id, bi = b.id;
  return a.graph->record(OpKind::matmul, {ai, bi}, std::move(y), [ai, bi, M, K, N](Graph& g, NodeId self) {
    const Tensor& gy = *g.grad_if(self);
    const Tensor& av = g.value(ai);
    const Tensor& bv = g.value(bi);
    if (g.requires_grad(ai)) {
      Tensor& ga = g.grad(ai);
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          double s = 0.0;
          for (std::size_t j = 0; j < N; ++j) s += gy[i * N + j] * bv[k * N + j];
          ga[i * K + k] += s;
        }
    }
    if (g.requires_grad(bi)) {
      Tensor& gb = g.grad(bi);
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          const double aik = av[i * K + k];
          for (std::size_t j = 0; j < N; ++j) gb[k * N + j] += aik * gy[i * N + j];
        }
    }
  });
}

Var pointwise_conv(Var x, Var w, std::optional<Var> bias) {
  require_same_graph(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(xv.rank() >= 1 && wv.rank() == 2 && xv.shape().back() == wv.dim(0),
          "pointwise_conv: input " + node_desc(x) + " incompatible with weight " + node_desc(w));
  const std::size_t Ci = wv.dim(0), Co = wv.dim(1), M = xv.size() / Ci;
  require_bias(bias, x, Co, "pointwise_conv");
  Shape out_shape = xv.shape();
  out_shape.back() = Co;
  Tensor y(out_shape);
  const Tensor* bv = bias ? &bias->value() : nullptr;
  for (std::size_t i = 0; i < M; ++i) {
    double* yr = &y[i * Co];
    if (bv)
      for (std::size_t o = 0; o < Co; ++o) yr[o] = (*bv)[o];
    const double* xr = &xv[i * Ci];
    for (std::size_t c = 0; c < Ci; ++c) {
      const double xc = xr[c];
      if (xc == 0.0) continue;
      const double* wr = &wv[c * Co];
      for (std::size_t o = 0; o < Co; ++o) yr[o] += xc * wr[o];
    }
  }
  std::vector<NodeId> inputs{x.id, w.id};
  if (bias) inputs.push_back(bias->id);
  const NodeId xi = x.id, wi = w.id;
  const std::optional<NodeId> bi = bias ? std::optional<NodeId>(bias->id) : std::nullopt;
  return x.graph->record(OpKind::pointwise_conv, std::move(inputs), std::move(y),
                         [xi, wi, bi, M, Ci, Co](Graph& g, NodeId self) {
                           const Tensor& gy = *g.grad_if(self);
                           const Tensor& xv = g.value(xi);
                           const Tensor& wv = g.value(wi);
                           if (g.requires_grad(xi)) {
                             Tensor& gx = g.grad(xi);
                             for (std::size_t i = 0; i < M; ++i) {
                               const double* gr = &gy[i * Co];
                               for (std::size_t c = 0; c < Ci; ++c) {
                                 const double* wr = &wv[c * Co];
                                 double s = 0.0;
                                 for (std::size_t o = 0; o < Co; ++o) s += gr[o] * wr[o];
                                 gx[i * Ci + c] += s;
                               }
                             }
                           }
                           if (g.requires_grad(wi)) {
                             Tensor& gw = g.grad(wi);
                             for (std::size_t i = 0; i < M; ++i) {
                               const double* gr = &gy[i * Co];
                               for (std::size_t c = 0; c < Ci; ++c) {
                                 const double xc = xv[i * Ci + c];
                                 if (xc == 0.0) continue;
                                 double* gwr = &gw[c * Co];
                                 for (std::size_t o = 0; o < Co; ++o) gwr[o] += xc * gr[o];
                               }
                             }
                           }
                           if (bi && g.requires_grad(*bi)) {
                             Tensor& gb = g.grad(*bi);
                             for (std::size_t i = 0; i < M; ++i)
                               for (std::size_t o = 0; o < Co; ++o) gb[o] += gy[i * Co + o];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Convolutions

Var depthwise_conv3x3(Var x, Var w, std::optional<Var> bias) {
  require_same_graph(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(xv.rank() == 3, "depthwise_conv3x3: input must be [H,W,C], got " + node_desc(x));
  const std::size_t H = xv.dim(0), W = xv.dim(1), C = xv.dim(2);
  require(wv.shape() == Shape{3, 3, C}, "depthwise_conv3x3: weight " + node_desc(w) + " must be [3,3,C]");
  require_bias(bias, x, C, "depthwise_conv3x3");
  Tensor y({H, W, C});
  const Tensor* bv = bias ? &bias->value() : nullptr;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      double* yr = &y[(i * W + j) * C];
      if (bv)
        for (std::size_t c = 0; c < C; ++c) yr[c] = (*bv)[c];
      for (std::size_t di = 0; di < 3; ++di) {
        const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + di) - 1;
        if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t dj = 0; dj < 3; ++dj) {
          const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + dj) - 1;
          if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(W)) continue;
          const double* xr = &xv[(static_cast<std::size_t>(si) * W + static_cast<std::size_t>(sj)) * C];
          const double* wr = &wv[(di * 3 + dj) * C];
          for (std::size_t c = 0; c < C; ++c) yr[c] += wr[c] * xr[c];
        }
      }
    }
  std::vector<NodeId> inputs{x.id, w.id};
  if (bias) inputs.push_back(bias->id);
  const NodeId xi = x.id, wi = w.id;
  const std::optional<NodeId> bi = bias ? std::optional<NodeId>(bias->id) : std::nullopt;
  return x.graph->record(
      OpKind::depthwise_conv3x3, std::move(inputs), std::move(y), [xi, wi, bi, H, W, C](Graph& g, NodeId self) {
        const Tensor& gy = *g.grad_if(self);
        const Tensor& xv = g.value(xi);
        const Tensor& wv = g.value(wi);
        Tensor* gx = g.requires_grad(xi) ? &g.grad(xi) : nullptr;
        Tensor* gw = g.requires_grad(wi) ? &g.grad(wi) : nullptr;
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j) {
            const double* gr = &gy[(i * W + j) * C];
            for (std::size_t di = 0; di < 3; ++di) {
              const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + di) - 1;
              if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t dj = 0; dj < 3; ++dj) {
                const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + dj) - 1;
                if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(W)) continue;
                const std::size_t xo = (static_cast<std::size_t>(si) * W + static_cast<std::size_t>(sj)) * C;
                const std::size_t wo = (di * 3 + dj) * C;
                for (std::size_t c = 0; c < C; ++c) {
                  if (gx) (*gx)[xo + c] += gr[c] * wv[wo + c];
                  if (gw) (*gw)[wo + c] += gr[c] * xv[xo + c];
                }
              }
            }
          }
        if (bi && g.requires_grad(*bi)) {
          Tensor& gb = g.grad(*bi);
          for (std::size_t p = 0; p < H * W; ++p)
            for (std::size_t c = 0; c < C; ++c) gb[c] += gy[p * C + c];
        }
      });
}

Var conv3x3(Var x, Var w, std::optional<Var> bias) {
  require_same_graph(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(xv.rank() == 3, "conv3x3: input must be [H,W,C], got " + node_desc(x));
  const std::size_t H = xv.dim(0), W = xv.dim(1), Ci = xv.dim(2);
  require(wv.rank() == 4 && wv.dim(0) == 3 && wv.dim(1) == 3 && wv.dim(2) == Ci,
          "conv3x3: weight " + node_desc(w) + " must be [3,3,Ci,Co]");
  const std::size_t Co = wv.dim(3);
  require_bias(bias, x, Co, "conv3x3");
  Tensor y({H, W, Co});
  const Tensor* bv = bias ? &bias->value() : nullptr;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      double* yr = &y[(i * W + j) * Co];
      if (bv)
        for (std::size_t o = 0; o < Co; ++o) yr[o] = (*bv)[o];
      for (std::size_t di = 0; di < 3; ++di) {
        const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + di) - 1;
        if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t dj = 0; dj < 3; ++dj) {
          const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + dj) - 1;
          if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(W)) continue;
          const double* xr = &xv[(static_cast<std::size_t>(si) * W + static_cast<std::size_t>(sj)) * Ci];
          const double* wt = &wv[(di * 3 + dj) * Ci * Co];
          for (std::size_t c = 0; c < Ci; ++c) {
            const double xc = xr[c];
            const double* wr = wt + c * Co;
            for (std::size_t o = 0; o < Co; ++o) yr[o] += xc * wr[o];
          }
        }
      }
    }
  std::vector<NodeId> inputs{x.id, w.id};
  if (bias) inputs.push_back(bias->id);
  const NodeId xi = x.id, wi = w.id;
  const std::optional<NodeId> bi = bias ? std::optional<NodeId>(bias->id) : std::nullopt;
  return x.graph->record(
      OpKind::conv3x3, std::move(inputs), std::move(y), [xi, wi, bi, H, W, Ci, Co](Graph& g, NodeId self) {
        const Tensor& gy = *g.grad_if(self);
        const Tensor& xv = g.value(xi);
        const Tensor& wv = g.value(wi);
        Tensor* gx = g.requires_grad(xi) ? &g.grad(xi) : nullptr;
        Tensor* gw = g.requires_grad(wi) ? &g.grad(wi) : nullptr;
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j) {
            const double* gr = &gy[(i * W + j) * Co];
            for (std::size_t di = 0; di < 3; ++di) {
              const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + di) - 1;
              if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t dj = 0; dj < 3; ++dj) {
                const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + dj) - 1;
                if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(W)) continue;
                const std::size_t xo = (static_cast<std::size_t>(si) * W + static_cast<std::size_t>(sj)) * Ci;
                const std::size_t wt = (di * 3 + dj) * Ci * Co;
                for (std::size_t c = 0; c < Ci; ++c) {
                  const double* wr = &wv[wt + c * Co];
                  if (gx) {
                    double s = 0.0;
                    for (std::size_t o = 0; o < Co; ++o) s += gr[o] * wr[o];
                    (*gx)[xo + c] += s;
                  }
                  if (gw) {
                    const double xc = xv[xo + c];
                    double* gwr = &(*gw)[wt + c * Co];
                    for (std::size_t o = 0; o < Co; ++o) gwr[o] += xc * gr[o];
                  }
                }
              }
            }
          }
        if (bi && g.requires_grad(*bi)) {
          Tensor& gb = g.grad(*bi);
          for (std::size_t p = 0; p < H * W; ++p)
            for (std::size_t o = 0; o < Co; ++o) gb[o] += gy[p * Co + o];
        }
      });
}

Var strided_conv(Var x, Var w, std::optional<Var> bias) {
  require_same_graph(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(xv.rank() == 3, "strided_conv: input must be [H,W,C], got " + node_desc(x));
  require(wv.rank() == 4 && wv.dim(0) == wv.dim(1) && wv.dim(0) > 0 && wv.dim(2) == xv.dim(2),
          "strided_conv: weight " + node_desc(w) + " must be [k,k,Ci,Co]");
  const std::size_t k = wv.dim(0), H = xv.dim(0), W = xv.dim(1), Ci = xv.dim(2), Co = wv.dim(3);
  if (H % k != 0 || W % k != 0) {
    throw ShapeError("strided_conv: spatial extent " + std::to_string(H) + "x" + std::to_string(W) +
                     " is not divisible by stride " + std::to_string(k));
  }
  require_bias(bias, x, Co, "strided_conv");
  const std::size_t Ho = H / k, Wo = W / k;
  Tensor y({Ho, Wo, Co});
  const Tensor* bv = bias ? &bias->value() : nullptr;
  for (std::size_t I = 0; I < Ho; ++I)
    for (std::size_t J = 0; J < Wo; ++J) {
      double* yr = &y[(I * Wo + J) * Co];
      if (bv)
        for (std::size_t o = 0; o < Co; ++o) yr[o] = (*bv)[o];
      for (std::size_t di = 0; di < k; ++di)
        for (std::size_t dj = 0; dj < k; ++dj) {
          const double* xr = &xv[((I * k + di) * W + (J * k + dj)) * Ci];
          const double* wt = &wv[(di * k + dj) * Ci * Co];
          for (std::size_t c = 0; c < Ci; ++c) {
            const double xc = xr[c];
            const double* wr = wt + c * Co;
            for (std::size_t o = 0; o < Co; ++o) yr[o] += xc * wr[o];
          }
        }
    }
  std::vector<NodeId> inputs{x.id, w.id};
  if (bias) inputs.push_back(bias->id);
  const NodeId xi = x.id, wi = w.id;
  const std::optional<NodeId> bi = bias ? std::optional<NodeId>(bias->id) : std::nullopt;
  return x.graph->record(
      OpKind::strided_conv, std::move(inputs), std::move(y), [xi, wi, bi, k, W, Ci, Co, Ho, Wo](Graph& g, NodeId self) {
        const Tensor& gy = *g.grad_if(self);
        const Tensor& xv = g.value(xi);
        const Tensor& wv = g.value(wi);
        Tensor* gx = g.requires_grad(xi) ? &g.grad(xi) : nullptr;
        Tensor* gw = g.requires_grad(wi) ? &g.grad(wi) : nullptr;
        for (std::size_t I = 0; I < Ho; ++I)
          for (std::size_t J = 0; J < Wo; ++J) {
            const double* gr = &gy[(I * Wo + J) * Co];
            for (std::size_t di = 0; di < k; ++di)
              for (std::size_t dj = 0; dj < k; ++dj) {
                const std::size_t xo = ((I * k + di) * W + (J * k + dj)) * Ci;
                const std::size_t wt = (di * k + dj) * Ci * Co;
                for (std::size_t c = 0; c < Ci; ++c) {
                  const double* wr = &wv[wt + c * Co];
                  if (gx) {
                    double s = 0.0;
                    for (std::size_t o = 0; o < Co; ++o) s += gr[o] * wr[o];
                    (*gx)[xo + c] += s;
                  }
                  if (gw) {
                    const double xc = xv[xo + c];
                    double* gwr = &(*gw)[wt + c * Co];
                    for (std::size_t o = 0; o < Co; ++o) gwr[o] += xc * gr[o];
                  }
                }
              }
          }
        if (bi && g.requires_grad(*bi)) {
          Tensor& gb = g.grad(*bi);
          for (std::size_t p = 0; p < Ho * Wo; ++p)
            for (std::size_t o = 0; o < Co; ++o) gb[o] += gy[p * Co + o];
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and activations

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_same_graph(x, gamma);
  require_same_graph(x, beta);
  const Tensor& xv = x.value();
  require(xv.rank() >= 1, "layer_norm: rank-0 input");
  const std::size_t C = xv.shape().back(), M = xv.size() / C;
  require(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
          "layer_norm: affine parameters must have shape [" + std::to_string(C) + "]");
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor y(xv.shape());
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto rstd = std::make_shared<std::vector<double>>(M);
  for (std::size_t i = 0; i < M; ++i) {
    const double* xr = &xv[i * C];
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += xr[c];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(C);
    const double r = 1.0 / std::sqrt(var + eps);
    (*rstd)[i] = r;
    for (std::size_t c = 0; c < C; ++c) {
      const double h = (xr[c] - mu) * r;
      (*xhat)[i * C + c] = h;
      y[i * C + c] = h * gv[c] + bv[c];
    }
  }
  const NodeId xi = x.id, gi = gamma.id, bi = beta.id;
  return x.graph->record(OpKind::layer_norm, {xi, gi, bi}, std::move(y),
                         [xi, gi, bi, M, C, xhat, rstd](Graph& g, NodeId self) {
                           const Tensor& gy = *g.grad_if(self);
                           const Tensor& gv = g.value(gi);
                           if (g.requires_grad(xi)) {
                             Tensor& gx = g.grad(xi);
                             for (std::size_t i = 0; i < M; ++i) {
                               double m1 = 0.0, m2 = 0.0;
                               for (std::size_t c = 0; c < C; ++c) {
                                 const double gh = gy[i * C + c] * gv[c];
                                 m1 += gh;
                                 m2 += gh * (*xhat)[i * C + c];
                               }
                               m1 /= static_cast<double>(C);
                               m2 /= static_cast<double>(C);
                               for (std::size_t c = 0; c < C; ++c) {
                                 const double gh = gy[i * C + c] * gv[c];
                                 gx[i * C + c] += (*rstd)[i] * (gh - m1 - (*xhat)[i * C + c] * m2);
                               }
                             }
                           }
                           if (g.requires_grad(gi)) {
                             Tensor& gg = g.grad(gi);
                             for (std::size_t i = 0; i < M; ++i)
                               for (std::size_t c = 0; c < C; ++c) gg[c] += gy[i * C + c] * (*xhat)[i * C + c];
                           }
                           if (g.requires_grad(bi)) {
                             Tensor& gb = g.grad(bi);
                             for (std::size_t i = 0; i < M; ++i)
                               for (std::size_t c = 0; c < C; ++c) gb[c] += gy[i * C + c];
                           }
                         });
}

Var silu(Var x) {
  return unary(x, OpKind::silu, [](double v) {
    const double s = sigmoid(v);
    return std::pair{v * s, s * (1.0 + v * (1.0 - s))};
  });
}

Var softplus(Var x) {
  return unary(x, OpKind::softplus, [](double v) {
    const double y = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
    return std::pair{y, sigmoid(v)};
  });
}

Var exp(Var x) {
  return unary(x, OpKind::exp, [](double v) {
    const double e = std::exp(v);
    return std::pair{e, e};
  });
}

Var log(Var x, double floor) {
  return unary(x, OpKind::log, [floor](double v) {
    if (v > floor) return std::pair{std::log(v), 1.0 / v};
    return std::pair{std::log(floor), 0.0};
  });
}

Var scale(Var x, double c) {
  return unary(x, OpKind::scale, [c](double v) { return std::pair{c * v, c}; });
}

Var softmax(Var x) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 1, "softmax: rank-0 input");
  const std::size_t K = xv.shape().back(), M = xv.size() / K;
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < M; ++i) {
    const double* xr = &xv[i * K];
    double* yr = &y[i * K];
    const double mx = *std::max_element(xr, xr + K);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += (yr[k] = std::exp(xr[k] - mx));
    for (std::size_t k = 0; k < K; ++k) yr[k] /= s;
  }
  const NodeId xi = x.id;
  return x.graph->record(OpKind::softmax, {xi}, std::move(y), [xi, M, K](Graph& g, NodeId self) {
    if (!g.requires_grad(xi)) return;
    const Tensor& gy = *g.grad_if(self);
    const Tensor& yv = g.value(self);
    Tensor& gx = g.grad(xi);
    for (std::size_t i = 0; i < M; ++i) {
      double dot = 0.0;
      for (std::size_t k = 0; k < K; ++k) dot += gy[i * K + k] * yv[i * K + k];
      for (std::size_t k = 0; k < K; ++k) gx[i * K + k] += yv[i * K + k] * (gy[i * K + k] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise binary

namespace {

template <class F, class B>
Var binary(Var a, Var b, OpKind kind, F&& fwd, B bwd) {
  require_same_shape(a, b, op_name(kind));
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) y[i] = fwd(av[i], bv[i]);
  const NodeId ai = a.id, bi = b.id;
  return a.graph->record(kind, {ai, bi}, std::move(y), [ai, bi, bwd](Graph& g, NodeId self) {
    const Tensor& gy = *g.grad_if(self);
    const Tensor& av = g.value(ai);
    const Tensor& bv = g.value(bi);
    Tensor* ga = g.requires_grad(ai) ? &g.grad(ai) : nullptr;
    // Same node on both sides (x*x): g.grad returns the same accumulator, which is fine.
    Tensor* gb = g.requires_grad(bi) ? &g.grad(bi) : nullptr;
    for (std::size_t i = 0; i < gy.size(); ++i) {
      auto [da, db] = bwd(av[i], bv[i]);
      if (ga) (*ga)[i] += gy[i] * da;
      if (gb) (*gb)[i] += gy[i] * db;
    }
  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary(a, b, OpKind::add, [](double x, double y) { return x + y; },
                [](double, double) { return std::pair{1.0, 1.0}; });
}

Var sub(Var a, Var b) {
  return binary(a, b, OpKind::sub, [](double x, double y) { return x - y; },
                [](double, double) { return std::pair{1.0, -1.0}; });
}

Var mul(Var a, Var b) {
  return binary(a, b, OpKind::mul, [](double x, double y) { return x * y; },
                [](double x, double y) { return std::pair{y, x}; });
}

Var add_n(std::span<const Var> xs) {
  require(!xs.empty(), "add_n: no operands");
  std::vector<NodeId> ids;
  Tensor y(xs[0].shape());
  for (Var v : xs) {
    require_same_shape(xs[0], v, "add_n");
    ids.push_back(v.id);
    const Tensor& vv = v.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += vv[i];
  }
  auto in = ids;
  return xs[0].graph->record(OpKind::add, std::move(ids), std::move(y), [in](Graph& g, NodeId self) {
    const Tensor& gy = *g.grad_if(self);
    for (NodeId id : in) {
      if (!g.requires_grad(id)) continue;
      Tensor& gx = g.grad(id);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Structural

Var concat(std::span<const Var> xs, std::size_t axis) {
  require(!xs.empty(), "concat: no operands");
  const Shape& s0 = xs[0].shape();
  require(axis < s0.size(), "concat: axis out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  std::vector<NodeId> ids;
  std::vector<std::size_t> dims;
  for (Var v : xs) {
    require_same_graph(xs[0], v);
    Shape s = v.shape();
    require(s.size() == s0.size(), "concat: rank mismatch at " + node_desc(v));
    for (std::size_t i = 0; i < s.size(); ++i)
      require(i == axis || s[i] == s0[i], "concat: extent mismatch at " + node_desc(v));
    out_shape[axis] += s[axis];
    ids.push_back(v.id);
    dims.push_back(s[axis]);
  }
  const AxisSplit sp = split_axis(out_shape, axis);
  Tensor y(out_shape);
  std::size_t start = 0;
  for (std::size_t n = 0; n < xs.size(); ++n) {
    const Tensor& v = xs[n].value();
    const std::size_t block = dims[n] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(&v[o * block], block, &y[o * sp.dim * sp.inner + start * sp.inner]);
    start += dims[n];
  }
  auto in = ids;
  return xs[0].graph->record(OpKind::concat, std::move(ids), std::move(y), [in, dims, sp](Graph& g, NodeId self) {
    const Tensor& gy = *g.grad_if(self);
    std::size_t start = 0;
    for (std::size_t n = 0; n < in.size(); ++n) {
      const std::size_t block = dims[n] * sp.inner;
      if (g.requires_grad(in[n])) {
        Tensor& gx = g.grad(in[n]);
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < block; ++i) gx[o * block + i] += gy[o * sp.dim * sp.inner + start * sp.inner + i];
      }
      start += dims[n];
    }
  });
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  require(axis < s.size() && begin < end && end <= s[axis],
          "slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " + node_desc(x));
  const AxisSplit sp = split_axis(s, axis);
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  Tensor y(out_shape);
  const std::size_t block = (end - begin) * sp.inner;
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(&xv[o * sp.dim * sp.inner + begin * sp.inner], block, &y[o * block]);
  const NodeId xi = x.id;
  return x.graph->record(OpKind::slice, {xi}, std::move(y), [xi, sp, begin, block](Graph& g, NodeId self) {
    if (!g.requires_grad(xi)) return;
    const Tensor& gy = *g.grad_if(self);
    Tensor& gx = g.grad(xi);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < block; ++i) gx[o * sp.dim * sp.inner + begin * sp.inner + i] += gy[o * block + i];
  });
}

Var reshape(Var x, Shape shape) {
  require(shape_size(shape) == x.value().size(),
          "reshape: " + node_desc(x) + " cannot become " + shape_str(shape));
  Tensor y = x.value().reshaped(std::move(shape));
  const NodeId xi = x.id;
  return x.graph->record(OpKind::reshape, {xi}, std::move(y), [xi](Graph& g, NodeId self) {
    if (!g.requires_grad(xi)) return;
    const Tensor& gy = *g.grad_if(self);
    Tensor& gx = g.grad(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

Var permute(Var x, std::vector<std::size_t> axes) {
  const Shape& s = x.shape();
  require(axes.size() == s.size(), "permute: axis list length mismatch for " + node_desc(x));
  std::vector<bool> seen(s.size(), false);
  for (std::size_t a : axes) {
    require(a < s.size() && !seen[a], "permute: axes are not a permutation");
    seen[a] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[axes[i]];
  std::vector<std::size_t> in_strides(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  // source offset for every destination element
  auto src = std::make_shared<std::vector<std::size_t>>(shape_size(s));
  std::vector<std::size_t> idx(s.size(), 0);
  for (std::size_t d = 0; d < src->size(); ++d) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < s.size(); ++i) off += idx[i] * in_strides[axes[i]];
    (*src)[d] = off;
    for (std::size_t i = s.size(); i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  const Tensor& xv = x.value();
  Tensor y(out_shape);
  for (std::size_t d = 0; d < src->size(); ++d) y[d] = xv[(*src)[d]];
  const NodeId xi = x.id;
  return x.graph->record(OpKind::permute, {xi}, std::move(y), [xi, src](Graph& g, NodeId self) {
    if (!g.requires_grad(xi)) return;
    const Tensor& gy = *g.grad_if(self);
    Tensor& gx = g.grad(xi);
    for (std::size_t d = 0; d < src->size(); ++d) gx[(*src)[d]] += gy[d];
  });
}

Var upsample_nearest(Var x, std::size_t f) {
  const Tensor& xv = x.value();
  require(xv.rank() == 3 && f >= 1, "upsample_nearest: input must be [H,W,C], got " + node_desc(x));
  const std::size_t H = xv.dim(0), W = xv.dim(1), C = xv.dim(2);
  Tensor y({H * f, W * f, C});
  for (std::size_t i = 0; i < H * f; ++i)
    for (std::size_t j = 0; j < W * f; ++j)
      std::copy_n(&xv[((i / f) * W + j / f) * C], C, &y[(i * W * f + j) * C]);
  const NodeId xi = x.id;
  return x.graph->record(OpKind::upsample_nearest, {xi}, std::move(y), [xi, H, W, C, f](Graph& g, NodeId self) {
    if (!g.requires_grad(xi)) return;
    const Tensor& gy = *g.grad_if(self);
    Tensor& gx = g.grad(xi);
    for (std::size_t i = 0; i < H * f; ++i)
      for (std::size_t j = 0; j < W * f; ++j) {
        const double* gr = &gy[(i * W * f + j) * C];
        double* gxr = &gx[((i / f) * W + j / f) * C];
        for (std::size_t c = 0; c < C; ++c) gxr[c] += gr[c];
      }
  });
}

Var avg_pool(Var x, std::size_t f) {
  const Tensor& xv = x.value();
  require(xv.rank() == 3 && f >= 1, "avg_pool: input must be [H,W,C], got " + node_desc(x));
  const std::size_t H = xv.dim(0), W = xv.dim(1), C = xv.dim(2);
  if (H % f != 0 || W % f != 0) throw ShapeError("avg_pool: extent not divisible by factor");
  const std::size_t Ho = H / f, Wo = W / f;
  const double inv = 1.0 / static_cast<double>(f * f);
  // Mean shifted by the window's first element, so constant windows come out exact.
  Tensor y({Ho, Wo, C});
  for (std::size_t io = 0; io < Ho; ++io)
    for (std::size_t jo = 0; jo < Wo; ++jo)
      for (std::size_t c = 0; c < C; ++c) {
        const double ref = xv[((io * f) * W + jo * f) * C + c];
        double dev = 0.0;
        for (std::size_t di = 0; di < f; ++di)
          for (std::size_t dj = 0; dj < f; ++dj) dev += xv[((io * f + di) * W + jo * f + dj) * C + c] - ref;
        y[(io * Wo + jo) * C + c] = ref + dev * inv;
      }
  const NodeId xi = x.id;
  return x.graph->record(OpKind::avg_pool, {xi}, std::move(y), [xi, H, W, C, f, Wo, inv](Graph& g, NodeId self) {
    if (!g.requires_grad(xi)) return;
    const Tensor& gy = *g.grad_if(self);
    Tensor& gx = g.grad(xi);
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        for (std::size_t c = 0; c < C; ++c) gx[(i * W + j) * C + c] += inv * gy[((i / f) * Wo + j / f) * C + c];
  });
}

Var reduce_sum(Var x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.vec()) s += v;
  const NodeId xi = x.id;
  return x.graph->record(OpKind::reduce_sum, {xi}, Tensor::scalar(s), [xi](Graph& g, NodeId self) {
    if (!g.requires_grad(xi)) return;
    const double gy = (*g.grad_if(self))[0];
    Tensor& gx = g.grad(xi);
    for (double& v : gx.vec()) v += gy;
  });
}

Var reduce_mean(Var x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.vec()) s += v;
  const double inv = 1.0 / static_cast<double>(xv.size());
  const NodeId xi = x.id;
  return x.graph->record(OpKind::reduce_mean, {xi}, Tensor::scalar(s * inv), [xi, inv](Graph& g, NodeId self) {
    if (!g.requires_grad(xi)) return;
    const double gy = (*g.grad_if(self))[0] * inv;
    Tensor& gx = g.grad(xi);
    for (double& v : gx.vec()) v += gy;
  });
}

Var gather_rows(Var x, std::vector<std::size_t> index) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 1, "gather_rows: rank-0 input");
  const std::size_t L = xv.dim(0), R = xv.size() / std::max<std::size_t>(L, 1);
  for (std::size_t i : index) require(i < L, "gather_rows: index out of range for " + node_desc(x));
  Shape out_shape = xv.shape();
  out_shape[0] = index.size();
  Tensor y(out_shape);
  for (std::size_t m = 0; m < index.size(); ++m) std::copy_n(&xv[index[m] * R], R, &y[m * R]);
  const NodeId xi = x.id;
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(index));
  return x.graph->record(OpKind::gather_rows, {xi}, std::move(y), [xi, idx, R](Graph& g, NodeId self) {
    if (!g.requires_grad(xi)) return;
    const Tensor& gy = *g.grad_if(self);
    Tensor& gx = g.grad(xi);
    for (std::size_t m = 0; m < idx->size(); ++m)
      for (std::size_t r = 0; r < R; ++r) gx[(*idx)[m] * R + r] += gy[m * R + r];
  });
}

Var scatter_rows(Var x, std::vector<std::size_t> index, std::size_t rows) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 1 && xv.dim(0) == index.size(),
          "scatter_rows: index length " + std::to_string(index.size()) + " does not match " + node_desc(x));
  const std::size_t R = index.empty() ? 0 : xv.size() / index.size();
  for (std::size_t i : index) require(i < rows, "scatter_rows: index out of range");
  Shape out_shape = xv.shape();
  out_shape[0] = rows;
  Tensor y(out_shape);
  for (std::size_t m = 0; m < index.size(); ++m)
    for (std::size_t r = 0; r < R; ++r) y[index[m] * R + r] += xv[m * R + r];
  const NodeId xi = x.id;
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(index));
  return x.graph->record(OpKind::scatter_rows, {xi}, std::move(y), [xi, idx, R](Graph& g, NodeId self) {
    if (!g.requires_grad(xi)) return;
    const Tensor& gy = *g.grad_if(self);
    Tensor& gx = g.grad(xi);
    for (std::size_t m = 0; m < idx->size(); ++m)
      for (std::size_t r = 0; r < R; ++r) gx[m * R + r] += gy[(*idx)[m] * R + r];
  });
}

Var pick(Var x, std::span<const int> labels, int ignore) {
  const Tensor& xv = x.value();
  require(xv.rank() == 2 && xv.dim(0) == labels.size(),
          "pick: " + node_desc(x) + " does not match " + std::to_string(labels.size()) + " labels");
  const std::size_t K = xv.dim(1);
  auto src = std::make_shared<std::vector<std::size_t>>();
  for (std::size_t m = 0; m < labels.size(); ++m) {
    if (labels[m] == ignore) continue;
    if (labels[m] < 0 || static_cast<std::size_t>(labels[m]) >= K) {
      throw DomainError("pick: label " + std::to_string(labels[m]) + " outside [0," + std::to_string(K) + ")");
    }
    src->push_back(m * K + static_cast<std::size_t>(labels[m]));
  }
  Tensor y({src->size()});
  for (std::size_t i = 0; i < src->size(); ++i) y[i] = xv[(*src)[i]];
  const NodeId xi = x.id;
  return x.graph->record(OpKind::pick, {xi}, std::move(y), [xi, src](Graph& g, NodeId self) {
    if (!g.requires_grad(xi)) return;
    const Tensor& gy = *g.grad_if(self);
    Tensor& gx = g.grad(xi);
    for (std::size_t i = 0; i < src->size(); ++i) gx[(*src)[i]] += gy[i];
  });
}

Var argmax(Var x) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 1, "argmax: rank-0 input");
  const std::size_t K = xv.shape().back(), M = xv.size() / K;
  Shape out_shape(xv.shape().begin(), xv.shape().end() - 1);
  Tensor y(out_shape);
  for (std::size_t i = 0; i < M; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (xv[i * K + k] > xv[i * K + best]) best = k;
    y[i] = static_cast<double>(best);
  }
  return x.graph->record_nondiff(OpKind::argmax, {x.id}, std::move(y));
}

}  // namespace stsmcd
