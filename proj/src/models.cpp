#include "stsmcd/models.hpp"

#include "stsmcd/errors.hpp"

namespace stsmcd::models {

Variant parse_variant(const std::string& name) {
  if (name == "micro" || name == "Micro") return Variant::micro;
  if (name == "tiny" || name == "Tiny") return Variant::tiny;
  if (name == "small" || name == "Small") return Variant::small;
  if (name == "base" || name == "Base") return Variant::base;
  throw DomainError("unknown model variant '" + name + "' (expected micro, tiny, small or base)");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::micro: return "micro";
    case Variant::tiny: return "tiny";
    case Variant::small: return "small";
    case Variant::base: return "base";
  }
  return "?";
}

ModelConfig make_config(Variant v) {
  ModelConfig c;
  c.variant = v;
  switch (v) {
    case Variant::micro:
      c.depths = {1, 1, 1, 1};
      c.channels = {8, 16, 32, 64};
      c.state_size = 4;
      break;
    case Variant::tiny:
      c.depths = {2, 2, 4, 2};
      c.channels = {96, 192, 384, 768};
      c.state_size = 16;
      break;
    case Variant::small:
      c.depths = {2, 2, 15, 2};
      c.channels = {96, 192, 384, 768};
      c.state_size = 16;
      break;
    case Variant::base:
      c.depths = {2, 2, 15, 2};
      c.channels = {128, 256, 512, 1024};
      c.state_size = 16;
      break;
  }
  return c;
}

blocks::VssConfig vss_config(const ModelConfig& cfg) {
  blocks::VssConfig v;
  v.gate_mode = cfg.gate_mode;
  v.ss2d.state_size = cfg.state_size;
  v.ss2d.mode = cfg.discretization;
  return v;
}

EncoderParams make_encoder(ParamStore& store, const std::string& prefix, const ModelConfig& cfg, Rng& rng) {
  EncoderParams p;
  const auto vc = vss_config(cfg);
  p.embed = blocks::make_patch(store, prefix + ".embed", 4, 3, cfg.channels[0], rng);
  for (std::size_t j = 0; j < 4; ++j) {
    if (j > 0) {
      p.merges[j - 1] = blocks::make_patch(store, prefix + ".merge" + std::to_string(j + 1), 2, cfg.channels[j - 1],
                                           cfg.channels[j], rng);
    }
    for (std::size_t b = 0; b < cfg.depths[j]; ++b) {
      p.stages[j].push_back(blocks::make_vss_block(
          store, prefix + ".stage" + std::to_string(j + 1) + ".block" + std::to_string(b), cfg.channels[j], vc, rng));
    }
  }
  return p;
}

namespace {

blocks::LinearParams make_head(ParamStore& store, const std::string& name, std::size_t in, std::size_t out) {
  return {&store.add(name + ".weight", Tensor({in, out})), &store.add(name + ".bias", Tensor({out}))};
}

}  // namespace

ChangeDecoderParams make_change_decoder(ParamStore& store, const std::string& prefix, const ModelConfig& cfg,
                                        std::size_t out_classes, Rng& rng) {
  ChangeDecoderParams p;
  const auto vc = vss_config(cfg);
  for (std::size_t j = 4; j-- > 0;) {
    p.stss[j] = blocks::make_stss_block(store, prefix + ".stss" + std::to_string(j + 1), cfg.channels[j], vc, rng);
    if (j < 3) {
      p.fuse[j] = blocks::make_fuse(store, prefix + ".fuse" + std::to_string(j + 1), cfg.channels[j],
                                    cfg.channels[j + 1], rng);
    }
  }
  p.head = make_head(store, prefix + ".head", cfg.channels[0], out_classes);
  return p;
}

SemanticDecoderParams make_semantic_decoder(ParamStore& store, const std::string& prefix, const ModelConfig& cfg,
                                            std::size_t out_classes, Rng& rng) {
  SemanticDecoderParams p;
  const auto vc = vss_config(cfg);
  for (std::size_t j = 4; j-- > 0;) {
    if (j < 3) {
      p.fuse[j] = blocks::make_fuse(store, prefix + ".fuse" + std::to_string(j + 1), cfg.channels[j],
                                    cfg.channels[j + 1], rng);
    }
    p.vss[j] = blocks::make_vss_block(store, prefix + ".vss" + std::to_string(j + 1), cfg.channels[j], vc, rng);
  }
  p.head = make_head(store, prefix + ".head", cfg.channels[0], out_classes);
  return p;
}

MultiLevelFeatures encoder_forward(Var image, const EncoderParams& p) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[2] != 3) throw ShapeError("encoder: image must be [H,W,3], got " + shape_str(s));
  if (s[0] % kInputMultiple != 0 || s[1] % kInputMultiple != 0 || s[0] == 0 || s[1] == 0) {
    throw ShapeError("encoder: image extent " + std::to_string(s[0]) + "x" + std::to_string(s[1]) +
                     " must be a positive multiple of 32");
  }
  MultiLevelFeatures out;
  Var x = blocks::patch_embed(image, p.embed);
  for (std::size_t j = 0; j < 4; ++j) {
    if (j > 0) x = blocks::patch_merge(x, p.merges[j - 1]);
    for (const auto& block : p.stages[j]) x = blocks::vss_block(x, block);
    out[j] = x;
  }
  return out;
}

namespace {

void require_matching(const MultiLevelFeatures& a, const MultiLevelFeatures& b) {
  for (std::size_t j = 0; j < 4; ++j) {
    if (a[j].shape() != b[j].shape()) {
      throw ShapeError("change decoder: level " + std::to_string(j + 1) + " features " + shape_str(a[j].shape()) +
                       " and " + shape_str(b[j].shape()) + " differ");
    }
  }
}

}  // namespace

Var change_decoder_forward(const MultiLevelFeatures& t1, const MultiLevelFeatures& t2, const ChangeDecoderParams& p) {
  require_matching(t1, t2);
  Var x = upsample_nearest(blocks::stss_block(t1[3], t2[3], p.stss[3]), 2);
  for (std::size_t j = 3; j-- > 0;) {
    Var s = blocks::stss_block(t1[j], t2[j], p.stss[j]);
    x = blocks::fuse_levels(s, x, p.fuse[j]);
    if (j > 0) x = upsample_nearest(x, 2);
  }
  // A 1x1 head commutes with nearest upsampling, so applying it first is exact
  // and 16x cheaper.
  return upsample_nearest(blocks::apply(x, p.head), 4);
}

Var semantic_decoder_forward(const MultiLevelFeatures& f, const SemanticDecoderParams& p) {
  Var x = blocks::vss_block(f[3], p.vss[3]);
  for (std::size_t j = 3; j-- > 0;) {
    x = blocks::fuse_levels(f[j], upsample_nearest(x, 2), p.fuse[j]);
    x = blocks::vss_block(x, p.vss[j]);
  }
  return upsample_nearest(blocks::apply(x, p.head), 4);
}

// ---------------------------------------------------------------------------

Model::Model(Task task, ModelConfig cfg, std::uint64_t seed) : task_(task), cfg_(cfg) {
  Rng rng(seed);
  encoder_ = make_encoder(store_, "encoder", cfg_, rng);
  change_ = make_change_decoder(store_, "change_decoder", cfg_, change_classes(), rng);
  if (task_ == Task::scd) {
    sem_t1_ = make_semantic_decoder(store_, "semantic_t1", cfg_, semantic_outputs(), rng);
    sem_t2_ = make_semantic_decoder(store_, "semantic_t2", cfg_, semantic_outputs(), rng);
  } else if (task_ == Task::bda) {
    sem_t1_ = make_semantic_decoder(store_, "localization", cfg_, semantic_outputs(), rng);
  }
}

std::size_t Model::change_classes() const { return task_ == Task::bda ? 1 + cfg_.damage_classes : 2; }

std::size_t Model::semantic_outputs() const {
  switch (task_) {
    case Task::bcd: return 0;
    case Task::scd: return 1 + cfg_.semantic_classes;
    case Task::bda: return 2;
  }
  return 0;
}

Logits Model::forward(Var x1, Var x2) const {
  const auto f1 = encoder_forward(x1, encoder_);
  const auto f2 = encoder_forward(x2, encoder_);
  Logits out{change_decoder_forward(f1, f2, change_), std::nullopt, std::nullopt};
  if (sem_t1_) out.semantic_t1 = semantic_decoder_forward(f1, *sem_t1_);
  if (sem_t2_) out.semantic_t2 = semantic_decoder_forward(f2, *sem_t2_);
  return out;
}

Probabilities softmax_all(const Logits& l) {
  Probabilities p{softmax(l.change), std::nullopt, std::nullopt};
  if (l.semantic_t1) p.semantic_t1 = softmax(*l.semantic_t1);
  if (l.semantic_t2) p.semantic_t2 = softmax(*l.semantic_t2);
  return p;
}

Probabilities Model::predict(Var x1, Var x2) const { return softmax_all(forward(x1, x2)); }

LabelMap argmax_map(const Tensor& scores) {
  if (scores.rank() != 3) throw ShapeError("argmax_map: scores must be [H,W,K], got " + shape_str(scores.shape()));
  const std::size_t H = scores.dim(0), W = scores.dim(1), K = scores.dim(2);
  LabelMap out(H, W);
  for (std::size_t i = 0; i < H * W; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (scores[i * K + k] > scores[i * K + best]) best = k;
    out.data[i] = static_cast<int>(best);
  }
  return out;
}

std::pair<LabelMap, LabelMap> semantic_change_mask(const LabelMap& t1, const LabelMap& t2, const LabelMap& change) {
  require_same_extent(t1, t2, "semantic_change_mask");
  require_same_extent(t1, change, "semantic_change_mask");
  LabelMap m1 = t1, m2 = t2;
  for (std::size_t i = 0; i < change.size(); ++i) {
    if (change.data[i] == 0) m1.data[i] = m2.data[i] = kIgnore;
  }
  return {std::move(m1), std::move(m2)};
}

std::vector<std::uint64_t> transition_matrix(const LabelMap& masked_t1, const LabelMap& masked_t2,
                                             std::size_t classes) {
  require_same_extent(masked_t1, masked_t2, "transition_matrix");
  std::vector<std::uint64_t> m(classes * classes, 0);
  const int k = static_cast<int>(classes);
  for (std::size_t i = 0; i < masked_t1.size(); ++i) {
    const int a = masked_t1.data[i], b = masked_t2.data[i];
    if (a < 1 || a > k || b < 1 || b > k) continue;
    ++m[static_cast<std::size_t>(a - 1) * classes + static_cast<std::size_t>(b - 1)];
  }
  return m;
}

}  // namespace stsmcd::models
