#pragma once

// State-space core: zero-order-hold discretization, the LTI recurrence and
// its convolution-kernel dual, and the selective (input-dependent) scan in
// sequential and parallel-prefix forms.
//
// State matrices are diagonal: a system with N states is described by N
// independent (a, b, c) triples. A selective scan over D channels keeps a
// [D, N] state and uses per-step delta [L, D] and projections B, C [L, N].

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "stsmcd/autodiff.hpp"
#include "stsmcd/tensor.hpp"

namespace stsmcd::ssm {

enum class Discretization {
  exact_zoh,  // b_bar = (delta*a)^-1 (exp(delta*a) - 1) delta*b
  euler_b,    // b_bar = delta*b
};

struct DiscretePair {
  double a_bar;
  double b_bar;
};

/// Zero-order hold for one diagonal entry. Throws DomainError if delta <= 0.
DiscretePair zoh_discretize(double a, double b, double delta);

/// (exp(z) - 1) / z with the z -> 0 limit.
double expm1_over_x(double z);

/// Diagonal discrete system with N states.
struct DiscreteSsm {
  std::vector<double> a_bar;
  std::vector<double> b_bar;
};

DiscreteSsm discretize(std::span<const double> a, std::span<const double> b, double delta);

/// h_t = a_bar*h_{t-1} + b_bar*x_t, y_t = <c, h_t>, h_0 = 0.
std::vector<double> lti_recurrent_scan(const DiscreteSsm& sys, std::span<const double> c, std::span<const double> x);
/// kernel[k] = <c, a_bar^k * b_bar>.
std::vector<double> lti_conv_kernel(const DiscreteSsm& sys, std::span<const double> c, std::size_t length);
/// Causal convolution y_t = sum_{k<=t} kernel[k] x[t-k].
std::vector<double> lti_conv_apply(std::span<const double> kernel, std::span<const double> x);

struct SelectiveInputs {
  Tensor x;                       // [L, D]
  Tensor delta;                   // [L, D], strictly positive
  Tensor B;                       // [L, N]
  Tensor C;                       // [L, N]
  std::optional<Tensor> d_skip;   // [D]
};

/// Reference recurrence. A is [D, N].
Tensor selective_scan_sequential(const SelectiveInputs& in, const Tensor& A,
                                 Discretization mode = Discretization::euler_b);

/// Same result through an associative prefix scan over (a_t, b_t) pairs with
/// (a1, b1) o (a2, b2) = (a2*a1, a2*b1 + b2). The sequence is cut into
/// `workers` chunks scanned on separate threads; chunk carries are combined
/// with a work-efficient up-sweep/down-sweep tree. The summation order depends
/// only on the worker count.
Tensor selective_scan_parallel(const SelectiveInputs& in, const Tensor& A,
                               Discretization mode = Discretization::euler_b, std::size_t workers = 4);

/// In-place inclusive affine scan on one lane: b[t] <- a[t]*b[t-1] + b[t].
/// `a` is overwritten with the running products.
void affine_prefix_scan(std::span<double> a, std::span<double> b, std::size_t workers);

/// Differentiable selective scan primitive with a fused adjoint recurrence.
/// u, delta [L, D]; A [D, N]; B, C [L, N]; d_skip [D].
Var selective_scan(Var u, Var delta, Var A, Var B, Var C, std::optional<Var> d_skip,
                   Discretization mode = Discretization::euler_b);

}  // namespace stsmcd::ssm
