#pragma once

// 2D cross-scan: a feature map is unfolded into four directional token
// sequences, each sequence goes through its own selective scan, and the
// results are scattered back and summed.
//
// Direction 1 reads row-major from the top-left corner, direction 2 is its
// reversal. Direction 3 reads column-major (the transposed raster) and
// direction 4 is its reversal.

#include <array>
#include <cstddef>
#include <vector>

#include "stsmcd/autodiff.hpp"
#include "stsmcd/checkpoint.hpp"
#include "stsmcd/rng.hpp"
#include "stsmcd/ssm.hpp"

namespace stsmcd::scan2d {

inline constexpr std::size_t kDirections = 4;

struct DirectionalLayout {
  std::size_t direction;              // 1..4
  std::vector<std::size_t> forward;   // forward[k] = spatial position read at step k
  std::vector<std::size_t> inverse;   // inverse[p] = step at which position p is read
};

DirectionalLayout make_layout(std::size_t direction, std::size_t height, std::size_t width);
std::array<DirectionalLayout, kDirections> make_layouts(std::size_t height, std::size_t width);

/// feature [H, W, C] -> four sequences [H*W, C].
std::array<Tensor, kDirections> cross_scan_expand(const Tensor& feature);
/// Scatters every sequence through its inverse permutation and sums d1+d2+d3+d4.
Tensor cross_scan_merge(const std::array<Tensor, kDirections>& sequences, std::size_t height, std::size_t width);

/// Learnable selective-scan parameters of one direction.
struct DirectionParams {
  Parameter* x_proj = nullptr;   // [D, R + 2N] -> (delta rank-R features, B, C)
  Parameter* dt_proj = nullptr;  // [R, D]
  Parameter* dt_bias = nullptr;  // [D]
  Parameter* a_log = nullptr;    // [D, N], A = -exp(a_log)
  Parameter* d_skip = nullptr;   // [D]
};

struct Ss2dOptions {
  std::size_t state_size = 16;
  ssm::Discretization mode = ssm::Discretization::euler_b;
  bool skip = true;
};

struct Ss2dParams {
  std::array<DirectionParams, kDirections> dirs;
  std::size_t channels = 0;
  std::size_t dt_rank = 1;
  Ss2dOptions options;
};

std::size_t default_dt_rank(std::size_t channels);

/// Registers four independent direction parameter groups under `prefix`.
/// Delta biases are set so that softplus(bias) is log-uniform in [0.001, 0.1].
Ss2dParams make_ss2d(ParamStore& store, const std::string& prefix, std::size_t channels, const Ss2dOptions& options,
                     Rng& rng);

/// One direction: tokens [L, D] -> selective scan output [L, D].
Var directional_scan(Var tokens, const DirectionParams& p, const Ss2dParams& cfg);

/// Expand -> per-direction selective scan -> merge. feature is [H, W, D].
Var ss2d_forward(Var feature, const Ss2dParams& params);

}  // namespace stsmcd::scan2d
