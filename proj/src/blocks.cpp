#include "stsmcd/blocks.hpp"

#include <array>
#include <cmath>

#include "stsmcd/errors.hpp"

namespace stsmcd::blocks {

namespace {

double fan_in_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

void require_map(Var v, std::size_t channels, const char* what) {
  const Shape& s = v.shape();
  if (s.size() != 3 || s[2] != channels) {
    throw ShapeError(std::string(what) + ": expected [H,W," + std::to_string(channels) + "], got " + shape_str(s));
  }
}

}  // namespace

Var apply(Var x, const LinearParams& p) {
  Graph& g = *x.graph;
  if (p.bias) return pointwise_conv(x, g.param(*p.weight), g.param(*p.bias));
  return pointwise_conv(x, g.param(*p.weight));
}

Var apply(Var x, const NormParams& p) {
  Graph& g = *x.graph;
  return layer_norm(x, g.param(*p.gamma), g.param(*p.beta));
}

LinearParams make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, bool bias,
                         Rng& rng) {
  const double b = fan_in_bound(in);
  LinearParams p;
  p.weight = &store.add(name + ".weight", uniform_tensor({in, out}, rng, -b, b));
  if (bias) p.bias = &store.add(name + ".bias", Tensor({out}));
  return p;
}

NormParams make_norm(ParamStore& store, const std::string& name, std::size_t channels) {
  return {&store.add(name + ".gamma", Tensor({channels}, 1.0)), &store.add(name + ".beta", Tensor({channels}))};
}

VssBlockParams make_vss_block(ParamStore& store, const std::string& prefix, std::size_t channels,
                              const VssConfig& config, Rng& rng) {
  VssBlockParams p;
  p.channels = channels;
  p.inner = channels * config.expansion;
  p.gate_mode = config.gate_mode;
  p.norm_in = make_norm(store, prefix + ".norm_in", channels);
  p.embed = make_linear(store, prefix + ".embed", channels, p.inner, false, rng);
  p.dw_weight = &store.add(prefix + ".dwconv.weight", uniform_tensor({3, 3, p.inner}, rng, -1.0 / 3, 1.0 / 3));
  p.dw_bias = &store.add(prefix + ".dwconv.bias", Tensor({p.inner}));
  p.ss2d = scan2d::make_ss2d(store, prefix + ".ss2d", p.inner, config.ss2d, rng);
  p.norm_scan = make_norm(store, prefix + ".norm_scan", p.inner);
  p.gate = make_linear(store, prefix + ".gate", p.inner, p.inner, false, rng);
  p.out_proj = make_linear(store, prefix + ".out_proj", p.inner, channels, false, rng);
  return p;
}

Var vss_block(Var x, const VssBlockParams& p) {
  require_map(x, p.channels, "vss_block");
  Graph& g = *x.graph;
  Var e = apply(apply(x, p.norm_in), p.embed);
  Var s = silu(depthwise_conv3x3(e, g.param(*p.dw_weight), g.param(*p.dw_bias)));
  s = apply(scan2d::ss2d_forward(s, p.ss2d), p.norm_scan);
  Var z = silu(apply(e, p.gate));
  Var mixed = p.gate_mode == GateMode::sum ? add(s, z) : mul(s, z);
  return add(x, apply(mixed, p.out_proj));
}

// ---------------------------------------------------------------------------

namespace {

void require_pair(const Tensor& f1, const Tensor& f2) {
  if (f1.rank() != 2 || f1.shape() != f2.shape()) {
    throw ShapeError("token arrangement: temporal token lists " + shape_str(f1.shape()) + " and " +
                     shape_str(f2.shape()) + " differ");
  }
}

}  // namespace

Tensor st_tokens_sequential(const Tensor& f1, const Tensor& f2) {
  require_pair(f1, f2);
  const std::size_t L = f1.dim(0), C = f1.dim(1);
  Tensor out({2 * L, C});
  std::copy(f1.vec().begin(), f1.vec().end(), out.vec().begin());
  std::copy(f2.vec().begin(), f2.vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(L * C));
  return out;
}

Tensor st_tokens_cross(const Tensor& f1, const Tensor& f2) {
  require_pair(f1, f2);
  const std::size_t L = f1.dim(0), C = f1.dim(1);
  Tensor out({2 * L, C});
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < C; ++c) {
      out[(2 * t) * C + c] = f1[t * C + c];
      out[(2 * t + 1) * C + c] = f2[t * C + c];
    }
  return out;
}

Tensor st_tokens_parallel(const Tensor& f1, const Tensor& f2) {
  require_pair(f1, f2);
  const std::size_t L = f1.dim(0), C = f1.dim(1);
  Tensor out({L, 2 * C});
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < C; ++c) {
      out[t * 2 * C + c] = f1[t * C + c];
      out[t * 2 * C + C + c] = f2[t * C + c];
    }
  return out;
}

std::pair<Tensor, Tensor> st_untokens(StMechanism mechanism, const Tensor& arranged) {
  if (arranged.rank() != 2) throw ShapeError("st_untokens: arranged tokens must be [L,C]");
  const std::size_t rows = arranged.dim(0), cols = arranged.dim(1);
  if (mechanism == StMechanism::parallel) {
    if (cols % 2) throw ShapeError("st_untokens: parallel arrangement needs an even channel count");
    const std::size_t C = cols / 2;
    Tensor f1({rows, C}), f2({rows, C});
    for (std::size_t t = 0; t < rows; ++t)
      for (std::size_t c = 0; c < C; ++c) {
        f1[t * C + c] = arranged[t * cols + c];
        f2[t * C + c] = arranged[t * cols + C + c];
      }
    return {std::move(f1), std::move(f2)};
  }
  if (rows % 2) throw ShapeError("st_untokens: temporal arrangement needs an even token count");
  const std::size_t L = rows / 2;
  Tensor f1({L, cols}), f2({L, cols});
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t r1 = mechanism == StMechanism::sequential ? t : 2 * t;
      const std::size_t r2 = mechanism == StMechanism::sequential ? L + t : 2 * t + 1;
      f1[t * cols + c] = arranged[r1 * cols + c];
      f2[t * cols + c] = arranged[r2 * cols + c];
    }
  return {std::move(f1), std::move(f2)};
}

StssBlockParams make_stss_block(ParamStore& store, const std::string& prefix, std::size_t channels,
                                const VssConfig& config, Rng& rng) {
  StssBlockParams p;
  p.channels = channels;
  p.sequential = make_vss_block(store, prefix + ".seq", channels, config, rng);
  p.cross = make_vss_block(store, prefix + ".crs", channels, config, rng);
  p.parallel = make_vss_block(store, prefix + ".par", 2 * channels, config, rng);
  p.parallel_reduce = make_linear(store, prefix + ".par_reduce", 2 * channels, channels, false, rng);
  p.combine = make_linear(store, prefix + ".combine", 3 * channels, channels, false, rng);
  return p;
}

StssBranches stss_branches(Var f1, Var f2, const StssBlockParams& p) {
  require_map(f1, p.channels, "stss_block");
  if (f1.shape() != f2.shape()) {
    throw ShapeError("stss_block: temporal maps " + shape_str(f1.shape()) + " and " + shape_str(f2.shape()) +
                     " are not co-registered");
  }
  const std::size_t H = f1.shape()[0], W = f1.shape()[1], C = p.channels, L = H * W;
  Var t1 = reshape(f1, {L, C});
  Var t2 = reshape(f2, {L, C});

  // Sequential: T1 tokens then T2 tokens, i.e. the two maps stacked vertically.
  const std::array<Var, 2> seq_parts{t1, t2};
  Var seq = vss_block(reshape(concat(seq_parts, 0), {2 * H, W, C}), p.sequential);
  seq = reshape(seq, {2 * L, C});
  Var seq_out = reshape(add(slice(seq, 0, 0, L), slice(seq, 0, L, 2 * L)), {H, W, C});

  // Cross: tokens interleaved, i.e. the two maps interleaved column by column.
  const std::array<Var, 2> crs_parts{reshape(t1, {L, 1, C}), reshape(t2, {L, 1, C})};
  Var crs = vss_block(reshape(concat(crs_parts, 1), {H, 2 * W, C}), p.cross);
  crs = reshape(crs, {L, 2, C});
  Var crs_out = reshape(add(slice(crs, 1, 0, 1), slice(crs, 1, 1, 2)), {H, W, C});

  // Parallel: channel concatenation, modeled jointly and reduced back to C.
  const std::array<Var, 2> par_parts{f1, f2};
  Var par = vss_block(concat(par_parts, 2), p.parallel);
  Var par_out = apply(par, p.parallel_reduce);
  return {seq_out, crs_out, par_out};
}

Var stss_block(Var f1, Var f2, const StssBlockParams& p) {
  const StssBranches b = stss_branches(f1, f2, p);
  const std::array<Var, 3> parts{b.sequential, b.cross, b.parallel};
  return apply(concat(parts, 2), p.combine);
}

// ---------------------------------------------------------------------------

ResidualParams make_residual(ParamStore& store, const std::string& prefix, std::size_t channels, Rng& rng) {
  const double b = fan_in_bound(9 * channels);
  ResidualParams p;
  p.conv_a_weight = &store.add(prefix + ".conv_a.weight", uniform_tensor({3, 3, channels, channels}, rng, -b, b));
  p.conv_a_bias = &store.add(prefix + ".conv_a.bias", Tensor({channels}));
  p.conv_b_weight = &store.add(prefix + ".conv_b.weight", Tensor({3, 3, channels, channels}));
  p.conv_b_bias = &store.add(prefix + ".conv_b.bias", Tensor({channels}));
  return p;
}

FuseParams make_fuse(ParamStore& store, const std::string& prefix, std::size_t high_channels,
                     std::size_t low_channels, Rng& rng) {
  return {make_linear(store, prefix + ".lateral", low_channels, high_channels, true, rng),
          make_residual(store, prefix + ".smooth", high_channels, rng)};
}

Var residual_smooth(Var x, const ResidualParams& p) {
  Graph& g = *x.graph;
  Var h = silu(conv3x3(x, g.param(*p.conv_a_weight), g.param(*p.conv_a_bias)));
  h = silu(conv3x3(h, g.param(*p.conv_b_weight), g.param(*p.conv_b_bias)));
  return add(x, h);
}

Var fuse_levels(Var high, Var low, const FuseParams& p) {
  const Shape& hs = high.shape();
  const Shape& ls = low.shape();
  if (hs.size() != 3 || ls.size() != 3 || hs[0] != ls[0] || hs[1] != ls[1]) {
    throw ShapeError("fuse_levels: spatial mismatch between " + shape_str(hs) + " and " + shape_str(ls));
  }
  return residual_smooth(add(high, apply(low, p.lateral)), p.smooth);
}

PatchParams make_patch(ParamStore& store, const std::string& prefix, std::size_t kernel, std::size_t in,
                       std::size_t out, Rng& rng) {
  const double b = fan_in_bound(kernel * kernel * in);
  return {kernel, &store.add(prefix + ".weight", uniform_tensor({kernel, kernel, in, out}, rng, -b, b)),
          &store.add(prefix + ".bias", Tensor({out}))};
}

Var patch_embed(Var image, const PatchParams& p) {
  Graph& g = *image.graph;
  return strided_conv(image, g.param(*p.weight), g.param(*p.bias));
}

Var patch_merge(Var feature, const PatchParams& p) {
  Graph& g = *feature.graph;
  return strided_conv(feature, g.param(*p.weight), g.param(*p.bias));
}

}  // namespace stsmcd::blocks
