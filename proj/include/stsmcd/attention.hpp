#pragma once

// Single-head global self-attention, forward only. Used as the quadratic
// baseline next to the linear-time selective scan.

#include "stsmcd/rng.hpp"
#include "stsmcd/tensor.hpp"

namespace stsmcd::attention {

struct AttentionParams {
  Tensor wq, wk, wv;  // [D, D]
};

AttentionParams make_attention(std::size_t width, Rng& rng);

/// softmax(Q K^T / sqrt(D)) V with Q = x wq, K = x wk, V = x wv; x is [L, D].
/// Rows are processed one at a time, so memory stays O(L D).
Tensor naive_attention(const Tensor& x, const AttentionParams& p);

/// The [L, L] row-stochastic weight matrix, for inspection.
Tensor attention_weights(const Tensor& x, const AttentionParams& p);

}  // namespace stsmcd::attention
