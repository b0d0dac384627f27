#pragma once

// Siamese encoder, change decoder and semantic decoders, assembled into the
// binary change (BCD), semantic change (SCD) and building damage (BDA)
// networks.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stsmcd/blocks.hpp"
#include "stsmcd/labels.hpp"
#include "stsmcd/task.hpp"

namespace stsmcd::models {

enum class Variant { micro, tiny, small, base };

Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);

struct ModelConfig {
  Variant variant = Variant::micro;
  std::array<std::size_t, 4> depths{1, 1, 1, 1};
  std::array<std::size_t, 4> channels{8, 16, 32, 64};
  std::size_t state_size = 4;
  blocks::GateMode gate_mode = blocks::GateMode::sum;
  ssm::Discretization discretization = ssm::Discretization::euler_b;
  std::size_t semantic_classes = 6;  // land-cover classes, excluding the no-change class 0
  std::size_t damage_classes = 4;    // damage levels, excluding the background class 0
};

ModelConfig make_config(Variant v);

/// Smallest spatial extent granularity accepted by the encoder.
inline constexpr std::size_t kInputMultiple = 32;

struct EncoderParams {
  blocks::PatchParams embed;
  std::array<blocks::PatchParams, 3> merges;
  std::array<std::vector<blocks::VssBlockParams>, 4> stages;
};

using MultiLevelFeatures = std::array<Var, 4>;

struct ChangeDecoderParams {
  std::array<blocks::StssBlockParams, 4> stss;
  std::array<blocks::FuseParams, 3> fuse;  // fuse[j] merges stage j+2 into stage j+1
  blocks::LinearParams head;
};

struct SemanticDecoderParams {
  std::array<blocks::VssBlockParams, 4> vss;
  std::array<blocks::FuseParams, 3> fuse;
  blocks::LinearParams head;
};

blocks::VssConfig vss_config(const ModelConfig& cfg);

EncoderParams make_encoder(ParamStore& store, const std::string& prefix, const ModelConfig& cfg, Rng& rng);
ChangeDecoderParams make_change_decoder(ParamStore& store, const std::string& prefix, const ModelConfig& cfg,
                                        std::size_t out_classes, Rng& rng);
SemanticDecoderParams make_semantic_decoder(ParamStore& store, const std::string& prefix, const ModelConfig& cfg,
                                            std::size_t out_classes, Rng& rng);

/// image [H, W, 3] with H, W divisible by 32 -> four maps at 1/4 .. 1/32.
MultiLevelFeatures encoder_forward(Var image, const EncoderParams& p);
/// Deepest to shallowest: STSS -> fuse with the upsampled deeper stage -> x2
/// upsample; a 1x1 head on the 1/4 map, then x4 nearest upsample.
Var change_decoder_forward(const MultiLevelFeatures& t1, const MultiLevelFeatures& t2, const ChangeDecoderParams& p);
/// VSS -> x2 upsample -> fuse with the next shallower level, repeated; the
/// 1/4 map goes through the head and a x4 nearest upsample.
Var semantic_decoder_forward(const MultiLevelFeatures& f, const SemanticDecoderParams& p);

/// Logits of one forward pass. For BCD only `change` is set. For SCD,
/// `semantic_t1`/`semantic_t2` hold (1 + classes)-way land-cover logits. For
/// BDA, `change` is the (1 + damage levels)-way classification and
/// `semantic_t1` the 2-way building localization from T1 features.
struct Logits {
  Var change;
  std::optional<Var> semantic_t1;
  std::optional<Var> semantic_t2;
};

/// Softmax probabilities matching Logits.
struct Probabilities {
  Var change;
  std::optional<Var> semantic_t1;
  std::optional<Var> semantic_t2;
};

class Model {
 public:
  Model(Task task, ModelConfig cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  Task task() const noexcept { return task_; }
  const ModelConfig& config() const noexcept { return cfg_; }
  ParamStore& params() noexcept { return store_; }
  const ParamStore& params() const noexcept { return store_; }

  const EncoderParams& encoder() const noexcept { return encoder_; }
  const ChangeDecoderParams& change_decoder() const noexcept { return change_; }
  const std::optional<SemanticDecoderParams>& semantic_t1() const noexcept { return sem_t1_; }
  const std::optional<SemanticDecoderParams>& semantic_t2() const noexcept { return sem_t2_; }

  std::size_t change_classes() const;
  std::size_t semantic_outputs() const;

  /// x1, x2: [H, W, 3]. Both temporal images go through the same encoder.
  Logits forward(Var x1, Var x2) const;
  Probabilities predict(Var x1, Var x2) const;

 private:
  Task task_;
  ModelConfig cfg_;
  ParamStore store_;
  EncoderParams encoder_;
  ChangeDecoderParams change_;
  std::optional<SemanticDecoderParams> sem_t1_;
  std::optional<SemanticDecoderParams> sem_t2_;
};

Probabilities softmax_all(const Logits& l);

/// Hard class map of a [H, W, K] tensor (lowest index wins ties).
LabelMap argmax_map(const Tensor& scores);

/// Keeps land-cover labels where the change map is 1 and writes kIgnore
/// elsewhere.
std::pair<LabelMap, LabelMap> semantic_change_mask(const LabelMap& t1, const LabelMap& t2, const LabelMap& change);

/// Counts "from-to" transitions between land-cover classes 1..classes over the
/// pixels where both masked maps hold a class. Entry (i, j) counts class i+1
/// turning into class j+1; the result is row-major classes x classes.
std::vector<std::uint64_t> transition_matrix(const LabelMap& masked_t1, const LabelMap& masked_t2,
                                             std::size_t classes);

}  // namespace stsmcd::models
