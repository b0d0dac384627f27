#include "stsmcd/scan2d.hpp"

#include <cmath>

#include "stsmcd/errors.hpp"

namespace stsmcd::scan2d {

DirectionalLayout make_layout(std::size_t direction, std::size_t height, std::size_t width) {
  if (direction < 1 || direction > kDirections) throw DomainError("scan direction must be in 1..4");
  if (height == 0 || width == 0) throw ShapeError("cross-scan needs a non-empty grid");
  const std::size_t n = height * width;
  DirectionalLayout layout{direction, std::vector<std::size_t>(n), std::vector<std::size_t>(n)};
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = 0;
    switch (direction) {
      case 1: p = k; break;
      case 2: p = n - 1 - k; break;
      case 3: p = (k % height) * width + k / height; break;
      case 4: {
        const std::size_t r = n - 1 - k;
        p = (r % height) * width + r / height;
        break;
      }
    }
    layout.forward[k] = p;
    layout.inverse[p] = k;
  }
  return layout;
}

std::array<DirectionalLayout, kDirections> make_layouts(std::size_t height, std::size_t width) {
  return {make_layout(1, height, width), make_layout(2, height, width), make_layout(3, height, width),
          make_layout(4, height, width)};
}

std::array<Tensor, kDirections> cross_scan_expand(const Tensor& feature) {
  if (feature.rank() != 3) throw ShapeError("cross_scan_expand: feature must be [H,W,C]");
  const std::size_t H = feature.dim(0), W = feature.dim(1), C = feature.dim(2);
  const auto layouts = make_layouts(H, W);
  std::array<Tensor, kDirections> out;
  for (std::size_t d = 0; d < kDirections; ++d) {
    out[d] = Tensor({H * W, C});
    for (std::size_t k = 0; k < H * W; ++k)
      for (std::size_t c = 0; c < C; ++c) out[d][k * C + c] = feature[layouts[d].forward[k] * C + c];
  }
  return out;
}

Tensor cross_scan_merge(const std::array<Tensor, kDirections>& sequences, std::size_t height, std::size_t width) {
  const std::size_t n = height * width;
  const Tensor& s0 = sequences[0];
  if (s0.rank() != 2) throw ShapeError("cross_scan_merge: sequences must be [L,C]");
  const std::size_t C = s0.dim(1);
  for (const Tensor& s : sequences) {
    if (s.shape() != Shape{n, C}) {
      throw ShapeError("cross_scan_merge: sequence shape " + shape_str(s.shape()) + " does not match grid " +
                       std::to_string(height) + "x" + std::to_string(width));
    }
  }
  const auto layouts = make_layouts(height, width);
  Tensor out({height, width, C});
  for (std::size_t d = 0; d < kDirections; ++d)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t c = 0; c < C; ++c) out[layouts[d].forward[k] * C + c] += sequences[d][k * C + c];
  return out;
}

std::size_t default_dt_rank(std::size_t channels) { return std::max<std::size_t>(1, (channels + 15) / 16); }

Ss2dParams make_ss2d(ParamStore& store, const std::string& prefix, std::size_t channels, const Ss2dOptions& options,
                     Rng& rng) {
  Ss2dParams p;
  p.channels = channels;
  p.dt_rank = default_dt_rank(channels);
  p.options = options;
  const std::size_t D = channels, N = options.state_size, R = p.dt_rank;
  const double x_bound = 1.0 / std::sqrt(static_cast<double>(D));
  const double dt_bound = 1.0 / std::sqrt(static_cast<double>(R));
  for (std::size_t k = 0; k < kDirections; ++k) {
    const std::string base = prefix + ".d" + std::to_string(k + 1);
    DirectionParams& d = p.dirs[k];
    d.x_proj = &store.add(base + ".x_proj", uniform_tensor({D, R + 2 * N}, rng, -x_bound, x_bound));
    d.dt_proj = &store.add(base + ".dt_proj", uniform_tensor({R, D}, rng, -dt_bound, dt_bound));
    Tensor bias({D});
    for (double& b : bias.vec()) {
      const double dt = std::exp(uniform(rng, std::log(0.001), std::log(0.1)));
      b = dt + std::log(-std::expm1(-dt));  // softplus^-1
    }
    d.dt_bias = &store.add(base + ".dt_bias", std::move(bias));
    Tensor a_log({D, N});
    for (std::size_t c = 0; c < D; ++c)
      for (std::size_t n = 0; n < N; ++n) a_log[c * N + n] = std::log(static_cast<double>(n + 1));
    d.a_log = &store.add(base + ".a_log", std::move(a_log));
    d.d_skip = &store.add(base + ".d_skip", Tensor({D}, 1.0));
  }
  return p;
}

Var directional_scan(Var tokens, const DirectionParams& p, const Ss2dParams& cfg) {
  Graph& g = *tokens.graph;
  const std::size_t R = cfg.dt_rank, N = cfg.options.state_size;
  Var proj = pointwise_conv(tokens, g.param(*p.x_proj));
  Var dt_low = slice(proj, 1, 0, R);
  Var B = slice(proj, 1, R, R + N);
  Var C = slice(proj, 1, R + N, R + 2 * N);
  Var delta = softplus(pointwise_conv(dt_low, g.param(*p.dt_proj), g.param(*p.dt_bias)));
  Var A = scale(exp(g.param(*p.a_log)), -1.0);
  std::optional<Var> skip;
  if (cfg.options.skip) skip = g.param(*p.d_skip);
  return ssm::selective_scan(tokens, delta, A, B, C, skip, cfg.options.mode);
}

Var ss2d_forward(Var feature, const Ss2dParams& params) {
  const Shape& s = feature.shape();
  if (s.size() != 3 || s[2] != params.channels) {
    throw ShapeError("ss2d_forward: feature " + shape_str(s) + " does not have " + std::to_string(params.channels) +
                     " channels");
  }
  const std::size_t H = s[0], W = s[1], D = s[2];
  const auto layouts = make_layouts(H, W);
  Var flat = reshape(feature, {H * W, D});
  std::array<Var, kDirections> merged;
  for (std::size_t k = 0; k < kDirections; ++k) {
    Var seq = gather_rows(flat, layouts[k].forward);
    Var y = directional_scan(seq, params.dirs[k], params);
    merged[k] = scatter_rows(y, layouts[k].forward, H * W);
  }
  return reshape(add_n(merged), {H, W, D});
}

}  // namespace stsmcd::scan2d
