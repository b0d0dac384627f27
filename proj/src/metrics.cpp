#include "stsmcd/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

#include "stsmcd/errors.hpp"

namespace stsmcd::metrics {

namespace {

double ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

double harmonic2(double a, double b) { return ratio(2.0 * a * b, a + b); }

}  // namespace

BinaryConfusion& BinaryConfusion::operator+=(const BinaryConfusion& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  return *this;
}

BinaryConfusion binary_confusion(const LabelMap& truth, const LabelMap& pred, int positive, int ignore) {
  require_same_extent(truth, pred, "binary_confusion");
  BinaryConfusion c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth.data[i] == ignore) continue;
    const bool t = truth.data[i] == positive;
    const bool p = pred.data[i] == positive;
    if (t && p) ++c.tp;
    else if (!t && p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double f1_score(const BinaryConfusion& c) {
  const double pre = ratio(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fp));
  const double rec = ratio(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fn));
  return harmonic2(pre, rec);
}

BcdMetrics bcd_metrics(const BinaryConfusion& c) {
  const double N = static_cast<double>(c.total());
  if (N == 0.0) throw DomainError("bcd metrics: no pixels were evaluated");
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  const double fn = static_cast<double>(c.fn), tn = static_cast<double>(c.tn);
  BcdMetrics m;
  m.rec = ratio(tp, tp + fn);
  m.pre = ratio(tp, tp + fp);
  m.oa = (tp + tn) / N;
  m.f1 = harmonic2(m.pre, m.rec);
  m.iou = ratio(tp, tp + fp + fn);
  const double pe = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (N * N);
  m.kc = ratio(m.oa - pe, 1.0 - pe);
  return m;
}

// ---------------------------------------------------------------------------

SemanticConfusion::SemanticConfusion(std::size_t land_cover_classes)
    : n_(land_cover_classes + 1), q_(n_ * n_, 0) {}

std::uint64_t SemanticConfusion::total() const {
  std::uint64_t s = 0;
  for (auto v : q_) s += v;
  return s;
}

void SemanticConfusion::add_count(std::size_t gt, std::size_t pred, std::uint64_t count) {
  if (gt >= n_ || pred >= n_) {
    throw DomainError("semantic confusion: class pair (" + std::to_string(gt) + "," + std::to_string(pred) +
                      ") outside 0.." + std::to_string(n_ - 1));
  }
  q_[gt * n_ + pred] += count;
}

void SemanticConfusion::add(const LabelMap& truth, const LabelMap& pred, int ignore) {
  require_same_extent(truth, pred, "semantic confusion");
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth.data[i] == ignore) continue;
    if (truth.data[i] < 0 || pred.data[i] < 0) throw DomainError("semantic confusion: negative label");
    add_count(static_cast<std::size_t>(truth.data[i]), static_cast<std::size_t>(pred.data[i]));
  }
}

ScdMetrics scd_metrics(const SemanticConfusion& q) {
  const std::size_t n = q.size();
  const double total = static_cast<double>(q.total());
  if (total == 0.0) throw DomainError("scd metrics: empty confusion matrix");
  std::vector<double> row(n, 0.0), col(n, 0.0);
  double diag = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double v = static_cast<double>(q(i, j));
      row[i] += v;
      col[j] += v;
      if (i == j) diag += v;
    }
  const double q00 = static_cast<double>(q(0, 0));
  ScdMetrics m;
  m.oa = diag / total;
  m.iou_nc = ratio(q00, row[0] + col[0] - q00);
  const double changed_hits = diag - q00;
  m.iou_c = ratio(changed_hits, total - q00);
  m.miou = 0.5 * (m.iou_nc + m.iou_c);

  // Kappa on the matrix with the no-change cell removed.
  const double hat_total = total - q00;
  if (hat_total == 0.0) throw DomainError("scd metrics: SeK undefined, no changed pixels in truth or prediction");
  double eta = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = i == 0 ? row[0] - q00 : row[i];
    const double c = i == 0 ? col[0] - q00 : col[i];
    eta += r * c;
  }
  eta /= hat_total * hat_total;
  const double rho = changed_hits / hat_total;
  // A single populated class gives eta = 1; kappa is then 1 for perfect
  // agreement and 0 otherwise.
  const double kappa = eta == 1.0 ? (rho == 1.0 ? 1.0 : 0.0) : (rho - eta) / (1.0 - eta);
  m.sek = std::exp(m.iou_c - 1.0) * kappa;

  const double pre = ratio(changed_hits, total - col[0]);
  const double rec = ratio(changed_hits, total - row[0]);
  m.f1 = harmonic2(pre, rec);
  return m;
}

// ---------------------------------------------------------------------------

BdaConfusion bda_confusion(const LabelMap& truth_loc, const LabelMap& pred_loc, const LabelMap& truth_clf,
                           const LabelMap& pred_clf, std::size_t damage_levels) {
  require_same_extent(truth_loc, pred_loc, "bda confusion");
  require_same_extent(truth_loc, truth_clf, "bda confusion");
  require_same_extent(truth_loc, pred_clf, "bda confusion");
  BdaConfusion c;
  c.loc = binary_confusion(truth_loc, pred_loc, 1);
  c.levels.assign(damage_levels, {});
  for (std::size_t i = 0; i < truth_clf.size(); ++i) {
    if (truth_loc.data[i] != 1 || truth_clf.data[i] == kIgnore) continue;
    const int t = truth_clf.data[i], p = pred_clf.data[i];
    for (std::size_t l = 0; l < damage_levels; ++l) {
      const int level = static_cast<int>(l + 1);
      BinaryConfusion& b = c.levels[l];
      if (t == level && p == level) ++b.tp;
      else if (t != level && p == level) ++b.fp;
      else if (t == level) ++b.fn;
      else ++b.tn;
    }
  }
  return c;
}

double harmonic_mean(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  double inv = 0.0;
  for (double v : values) {
    if (v <= 0.0) return 0.0;
    inv += 1.0 / v;
  }
  return static_cast<double>(values.size()) / inv;
}

double bda_overall(double f1_loc, double f1_clf) { return 0.3 * f1_loc + 0.7 * f1_clf; }

BdaMetrics bda_metrics(double f1_loc, const std::vector<double>& f1_levels) {
  BdaMetrics m;
  m.f1_loc = f1_loc;
  m.f1_level = f1_levels;
  m.f1_clf = harmonic_mean(f1_levels);
  m.f1_overall = bda_overall(m.f1_loc, m.f1_clf);
  return m;
}

BdaMetrics bda_metrics(const BdaConfusion& c) {
  std::vector<double> levels;
  for (const auto& l : c.levels) levels.push_back(f1_score(l));
  return bda_metrics(f1_score(c.loc), levels);
}

// ---------------------------------------------------------------------------

void append(Report& r, const BcdMetrics& m) {
  r.emplace_back("bcd.rec", m.rec);
  r.emplace_back("bcd.pre", m.pre);
  r.emplace_back("bcd.oa", m.oa);
  r.emplace_back("bcd.f1", m.f1);
  r.emplace_back("bcd.iou", m.iou);
  r.emplace_back("bcd.kc", m.kc);
}

void append(Report& r, const ScdMetrics& m) {
  r.emplace_back("scd.oa", m.oa);
  r.emplace_back("scd.f1", m.f1);
  r.emplace_back("scd.miou", m.miou);
  r.emplace_back("scd.sek", m.sek);
}

void append(Report& r, const BdaMetrics& m) {
  r.emplace_back("bda.f1_loc", m.f1_loc);
  for (std::size_t l = 0; l < m.f1_level.size(); ++l) r.emplace_back("bda.f1_level" + std::to_string(l + 1), m.f1_level[l]);
  r.emplace_back("bda.f1_clf", m.f1_clf);
  r.emplace_back("bda.f1_overall", m.f1_overall);
}

void write_report(std::ostream& os, const Report& r) {
  char buf[64];
  for (const auto& [key, value] : r) {
    std::snprintf(buf, sizeof buf, "%.6f", value);
    os << key << '=' << buf << '\n';
  }
}

}  // namespace stsmcd::metrics
