#pragma once

// Change-detection scores: binary (BCD), semantic (SCD) and building damage
// (BDA). All metrics derive from integer confusion counts; a ratio with a zero
// denominator is reported as 0.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "stsmcd/labels.hpp"

namespace stsmcd::metrics {

struct BinaryConfusion {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const noexcept { return tp + fp + fn + tn; }
  BinaryConfusion& operator+=(const BinaryConfusion& o);
  bool operator==(const BinaryConfusion&) const = default;
};

/// Counts pixels with label `positive` as positive, every other label as
/// negative; pixels whose ground truth is `ignore` are skipped.
BinaryConfusion binary_confusion(const LabelMap& truth, const LabelMap& pred, int positive = 1,
                                 int ignore = kIgnore);

struct BcdMetrics {
  double rec = 0, pre = 0, oa = 0, f1 = 0, iou = 0, kc = 0;
};

/// Throws DomainError for an empty confusion.
BcdMetrics bcd_metrics(const BinaryConfusion& c);

double f1_score(const BinaryConfusion& c);

/// Square count matrix over {0: no change} and land-cover classes 1..K.
/// Rows index ground truth, columns prediction.
class SemanticConfusion {
 public:
  explicit SemanticConfusion(std::size_t land_cover_classes);

  std::size_t size() const noexcept { return n_; }
  std::uint64_t operator()(std::size_t gt, std::size_t pred) const { return q_[gt * n_ + pred]; }
  std::uint64_t total() const;

  /// Tallies one (ground truth, prediction) pair of maps. Labels must lie in
  /// 0..K; pixels with ground truth `ignore` are skipped.
  void add(const LabelMap& truth, const LabelMap& pred, int ignore = kIgnore);
  void add_count(std::size_t gt, std::size_t pred, std::uint64_t count = 1);

 private:
  std::size_t n_;
  std::vector<std::uint64_t> q_;
};

struct ScdMetrics {
  double oa = 0, f1 = 0, miou = 0, sek = 0;
  double iou_nc = 0, iou_c = 0;
};

/// OA over all cells; IoU of the no-change class and of the changed classes
/// pooled; SeK = exp(IoU_c - 1) * kappa of the matrix with q00 zeroed;
/// F1 of changed pixels whose semantic class is also correct.
/// Throws DomainError when the matrix is empty or has no changed cells.
ScdMetrics scd_metrics(const SemanticConfusion& q);

struct BdaConfusion {
  BinaryConfusion loc;
  std::vector<BinaryConfusion> levels;  // one-vs-rest per damage level 1..L
};

/// Localization is scored on every pixel; damage levels are scored on the
/// pixels that are buildings in the ground truth.
BdaConfusion bda_confusion(const LabelMap& truth_loc, const LabelMap& pred_loc, const LabelMap& truth_clf,
                           const LabelMap& pred_clf, std::size_t damage_levels = 4);

struct BdaMetrics {
  double f1_loc = 0;
  std::vector<double> f1_level;
  double f1_clf = 0;
  double f1_overall = 0;
};

/// Harmonic mean; 0 if any value is 0.
double harmonic_mean(const std::vector<double>& values);
double bda_overall(double f1_loc, double f1_clf);
BdaMetrics bda_metrics(double f1_loc, const std::vector<double>& f1_levels);
BdaMetrics bda_metrics(const BdaConfusion& c);

using Report = std::vector<std::pair<std::string, double>>;

void append(Report& r, const BcdMetrics& m);
void append(Report& r, const ScdMetrics& m);
void append(Report& r, const BdaMetrics& m);

/// One `key=value` line per metric, six decimals.
void write_report(std::ostream& os, const Report& r);

}  // namespace stsmcd::metrics
