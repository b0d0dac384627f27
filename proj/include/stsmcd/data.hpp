#pragma once

// Synthetic bi-temporal scenes with exact labels, the on-disk dataset layout,
// training augmentations and test-time degradations.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stsmcd/labels.hpp"
#include "stsmcd/task.hpp"
#include "stsmcd/tensor.hpp"

namespace stsmcd::data {

/// Objects are drawn on a grid of kCell x kCell pixel cells, matching the
/// resolution of the network's finest prediction map.
inline constexpr std::size_t kCell = 4;

struct Sample {
  std::string id;
  Tensor t1, t2;            // [H, W, 3] in [0, 1]
  LabelMap change;          // bcd, scd: 1 where the scene changed
  LabelMap semantic_t1;     // scd: land-cover class at changed pixels, 0 elsewhere
  LabelMap semantic_t2;
  LabelMap loc;             // bda: 1 on building pixels
  LabelMap clf;             // bda: damage level 1..L on buildings, 0 elsewhere

  std::size_t height() const { return t1.dim(0); }
  std::size_t width() const { return t1.dim(1); }
};

struct DatasetInfo {
  Task task = Task::bcd;
  std::size_t count = 8;
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 0;
  std::size_t semantic_classes = 6;
  std::size_t damage_levels = 4;
};

struct Dataset {
  DatasetInfo info;
  std::vector<Sample> samples;
};

/// Changed (bcd, scd) or building (bda) pixel fraction enforced by rejection.
inline constexpr double kMinFraction = 0.05;
inline constexpr double kMaxFraction = 0.4;

void validate(const DatasetInfo& info);

/// Sample `index` depends only on (info, index): its generator is seeded with
/// mix_seed(info.seed, index).
Sample synth_sample(const DatasetInfo& info, std::size_t index);
Dataset synth_generate(const DatasetInfo& info, unsigned workers = 1);

/// Directory layout: meta.txt, manifest.txt, and one raster per sample in
/// T1/, T2/ and the task's label folders (GT_BCD/, GT_T1/, GT_T2/, GT_LOC/,
/// GT_CLF/).
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

/// Changed fraction for bcd/scd, building fraction for bda.
double foreground_fraction(const Sample& s, Task task);

// --- augmentation ----------------------------------------------------------

struct AugmentDraw {
  int quarter_turns = 0;  // counter-clockwise
  bool flip_lr = false;
  bool flip_tb = false;

  bool identity() const { return quarter_turns == 0 && !flip_lr && !flip_tb; }
};

AugmentDraw draw_augment(std::uint64_t seed);
Tensor transform(const Tensor& image, const AugmentDraw& d);
LabelMap transform(const LabelMap& labels, const AugmentDraw& d);
/// Same geometric transform on both images and every label map.
Sample augment(const Sample& s, const AugmentDraw& d);
Sample augment(const Sample& s, std::uint64_t seed);

// --- degradations ------------------------------------------------------------

enum class PerturbKind { none, blur, noise, scale };

struct Perturbation {
  PerturbKind kind = PerturbKind::none;
  double value = 0.0;  // sigma for blur and noise, factor for scale
};

/// "blur:2.0", "noise:0.05", "scale:0.5" or "none".
Perturbation parse_perturbation(const std::string& spec);
std::string perturbation_name(const Perturbation& p);

/// Separable Gaussian, radius ceil(3 sigma), reflected borders.
Tensor gaussian_blur(const Tensor& image, double sigma);
/// i.i.d. additive noise, clamped to [0, 1].
Tensor gaussian_noise(const Tensor& image, double sigma, std::uint64_t seed);
/// Nearest-neighbour resize by `factor`, then centre crop or zero pad back to
/// the original extent.
Tensor rescale(const Tensor& image, double factor);
Tensor perturb(const Tensor& image, const Perturbation& p, std::uint64_t seed);

}  // namespace stsmcd::data
