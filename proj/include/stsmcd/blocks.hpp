#pragma once

// Composite network blocks: VSS block, spatio-temporal token arrangements,
// STSS block, multi-level fusion and patch embedding/merging.

#include <string>
#include <utility>
#include <vector>

#include "stsmcd/autodiff.hpp"
#include "stsmcd/checkpoint.hpp"
#include "stsmcd/rng.hpp"
#include "stsmcd/scan2d.hpp"

namespace stsmcd::blocks {

enum class GateMode { sum, multiply };

struct LinearParams {
  Parameter* weight = nullptr;  // [Ci, Co]
  Parameter* bias = nullptr;    // [Co] or absent
};

struct NormParams {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;
};

struct VssConfig {
  std::size_t expansion = 2;
  GateMode gate_mode = GateMode::sum;
  scan2d::Ss2dOptions ss2d;
};

struct VssBlockParams {
  std::size_t channels = 0;
  std::size_t inner = 0;
  GateMode gate_mode = GateMode::sum;
  NormParams norm_in;
  LinearParams embed;
  Parameter* dw_weight = nullptr;  // [3, 3, inner]
  Parameter* dw_bias = nullptr;    // [inner]
  scan2d::Ss2dParams ss2d;
  NormParams norm_scan;
  LinearParams gate;
  LinearParams out_proj;
};

Var apply(Var x, const LinearParams& p);
Var apply(Var x, const NormParams& p);

LinearParams make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, bool bias,
                         Rng& rng);
NormParams make_norm(ParamStore& store, const std::string& name, std::size_t channels);

VssBlockParams make_vss_block(ParamStore& store, const std::string& prefix, std::size_t channels,
                              const VssConfig& config, Rng& rng);

/// out = x + proj( LN(SS2D(silu(DWConv(e)))) (+|*) silu(gate(e)) ),  e = embed(LN(x)).
Var vss_block(Var x, const VssBlockParams& p);

// ---------------------------------------------------------------------------
// Spatio-temporal token arrangements over token lists [L, C].

enum class StMechanism { sequential, cross, parallel };

/// [F1(1..L), F2(1..L)]
Tensor st_tokens_sequential(const Tensor& f1, const Tensor& f2);
/// [F1(1), F2(1), ..., F1(L), F2(L)]
Tensor st_tokens_cross(const Tensor& f1, const Tensor& f2);
/// Channel concatenation: [L, 2C]
Tensor st_tokens_parallel(const Tensor& f1, const Tensor& f2);
/// Inverses of the three arrangements.
std::pair<Tensor, Tensor> st_untokens(StMechanism mechanism, const Tensor& arranged);

struct StssBlockParams {
  std::size_t channels = 0;
  VssBlockParams sequential;
  VssBlockParams cross;
  VssBlockParams parallel;      // operates on 2C channels
  LinearParams parallel_reduce;  // 2C -> C
  LinearParams combine;          // 3C -> C, no bias
};

StssBlockParams make_stss_block(ParamStore& store, const std::string& prefix, std::size_t channels,
                                const VssConfig& config, Rng& rng);

/// The three mechanism outputs as [H, W, C] maps, before the combine projection.
struct StssBranches {
  Var sequential;
  Var cross;
  Var parallel;
};
StssBranches stss_branches(Var f1, Var f2, const StssBlockParams& p);
Var stss_block(Var f1, Var f2, const StssBlockParams& p);

// ---------------------------------------------------------------------------

struct ResidualParams {
  Parameter* conv_a_weight = nullptr;  // [3, 3, C, C]
  Parameter* conv_a_bias = nullptr;
  Parameter* conv_b_weight = nullptr;  // zero-initialized: identity at init
  Parameter* conv_b_bias = nullptr;
};

struct FuseParams {
  LinearParams lateral;  // C_lo -> C_hi
  ResidualParams smooth;
};

ResidualParams make_residual(ParamStore& store, const std::string& prefix, std::size_t channels, Rng& rng);
FuseParams make_fuse(ParamStore& store, const std::string& prefix, std::size_t high_channels,
                     std::size_t low_channels, Rng& rng);

/// x + silu(conv_b(silu(conv_a(x))))
Var residual_smooth(Var x, const ResidualParams& p);
/// residual(high + conv1x1(low)); both maps share the spatial extent.
Var fuse_levels(Var high, Var low, const FuseParams& p);

struct PatchParams {
  std::size_t kernel = 0;
  Parameter* weight = nullptr;  // [k, k, Ci, Co]
  Parameter* bias = nullptr;    // [Co]
};

PatchParams make_patch(ParamStore& store, const std::string& prefix, std::size_t kernel, std::size_t in,
                       std::size_t out, Rng& rng);
/// image [H, W, 3] -> [H/4, W/4, C1]
Var patch_embed(Var image, const PatchParams& p);
/// [h, w, Cj] -> [h/2, w/2, Cj+1]
Var patch_merge(Var feature, const PatchParams& p);

}  // namespace stsmcd::blocks
