#pragma once

// Define-by-run reverse-mode autodiff over dense double tensors.
//
// A Graph is a tape: every primitive application appends one node holding its
// value, its input node ids and a backward rule. Node ids increase in
// creation order, so the tape is topologically sorted by construction and
// backward() walks it in exact reverse order.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stsmcd/tensor.hpp"

namespace stsmcd {

/// A named learnable tensor living outside any graph.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(0.0); }
};

enum class OpKind : std::uint8_t {
  input,
  parameter,
  matmul,
  pointwise_conv,
  depthwise_conv3x3,
  conv3x3,
  strided_conv,
  layer_norm,
  silu,
  softplus,
  softmax,
  exp,
  log,
  add,
  sub,
  mul,
  scale,
  concat,
  slice,
  reshape,
  permute,
  upsample_nearest,
  avg_pool,
  reduce_sum,
  reduce_mean,
  gather_rows,
  scatter_rows,
  pick,
  argmax,
  selective_scan,
  lovasz_softmax,
  custom,
};

std::string_view op_name(OpKind kind);

using NodeId = std::size_t;
class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

using BackwardFn = std::function<void(Graph&, NodeId)>;

class Graph {
 public:
  struct Node {
    OpKind kind = OpKind::input;
    std::string label;
    std::vector<NodeId> inputs;
    Tensor value;
    Parameter* param = nullptr;
    bool requires_grad = false;
    bool differentiable = true;
    BackwardFn backward;
    Tensor grad;
    bool has_grad = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(Tensor value, bool requires_grad = false);
  /// Leaf bound to a Parameter. Repeated calls with the same parameter return
  /// the same node, so shared weights accumulate into one gradient.
  Var param(Parameter& p);

  /// Appends a differentiable primitive. Throws NumericFault on non-finite output.
  Var record(OpKind kind, std::vector<NodeId> inputs, Tensor value, BackwardFn backward,
             std::string label = {});
  /// Appends a primitive without a gradient (e.g. argmax).
  Var record_nondiff(OpKind kind, std::vector<NodeId> inputs, Tensor value);

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(NodeId id) const;
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }

  /// Gradient accumulator of a node, zero-allocated on first access.
  Tensor& grad(NodeId id);
  const Tensor* grad_if(NodeId id) const;

  /// Accumulates d(seed)/d(leaf) * cotangent into every requires-grad leaf.
  /// Intermediate gradients are rebuilt on each call; leaf gradients are not
  /// reset, so repeated calls accumulate.
  void backward(Var seed, const Tensor& cotangent);
  void backward(Var seed);

  /// (parameter, gradient) for every parameter leaf, in first-use order.
  std::vector<std::pair<Parameter*, const Tensor*>> parameter_grads() const;
  void accumulate_parameter_grads(double scale = 1.0) const;

  /// True when a non-differentiable node consumes a gradient-carrying input.
  std::optional<NodeId> first_blocking_node() const;

 private:
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, NodeId> param_nodes_;
  std::vector<NodeId> param_order_;
};

// ---------------------------------------------------------------------------
// Primitives. Shapes are channels-last: feature maps are [H, W, C], token
// sequences are [L, C].

Var matmul(Var a, Var b);
/// 1x1 convolution: contracts the last axis of x with w [Ci, Co].
Var pointwise_conv(Var x, Var w, std::optional<Var> bias = std::nullopt);
/// x [H, W, C], w [3, 3, C]; stride 1, zero padding 1.
Var depthwise_conv3x3(Var x, Var w, std::optional<Var> bias = std::nullopt);
/// x [H, W, Ci], w [3, 3, Ci, Co]; stride 1, zero padding 1.
Var conv3x3(Var x, Var w, std::optional<Var> bias = std::nullopt);
/// x [H, W, Ci], w [k, k, Ci, Co]; stride k, no padding.
Var strided_conv(Var x, Var w, std::optional<Var> bias = std::nullopt);
/// Normalizes over the last axis.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var silu(Var x);
Var softplus(Var x);
/// Softmax over the last axis.
Var softmax(Var x);
Var exp(Var x);
/// log(max(x, floor)); gradient is zero where the clamp is active.
Var log(Var x, double floor = 0.0);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double c);
Var add_n(std::span<const Var> xs);
Var concat(std::span<const Var> xs, std::size_t axis);
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);
Var reshape(Var x, Shape shape);
Var permute(Var x, std::vector<std::size_t> axes);
Var upsample_nearest(Var x, std::size_t factor);
Var avg_pool(Var x, std::size_t factor);
Var reduce_sum(Var x);
Var reduce_mean(Var x);
/// Rows of x (first axis) selected by index: y[m] = x[index[m]].
Var gather_rows(Var x, std::vector<std::size_t> index);
/// Adjoint of gather_rows: y[index[m]] += x[m], y has `rows` rows.
Var scatter_rows(Var x, std::vector<std::size_t> index, std::size_t rows);
/// x [M, K]; returns x[m, label[m]] for every m whose label != ignore.
Var pick(Var x, std::span<const int> labels, int ignore);
/// Index of the maximum over the last axis (lowest index wins ties). No gradient.
Var argmax(Var x);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace stsmcd
