#pragma once

// Cross-entropy and Lovasz-softmax losses over per-pixel class probabilities,
// and the composite task losses built from them.

#include "stsmcd/autodiff.hpp"
#include "stsmcd/labels.hpp"

namespace stsmcd::losses {

/// Probabilities below this are clamped before the logarithm.
inline constexpr double kLogClamp = 1e-12;

/// probs [H, W, K]; mean of -log p(y) over pixels whose label is not `ignore`.
/// Throws DomainError if every pixel is ignored or a label is out of range.
Var cross_entropy(Var probs, const LabelMap& labels, int ignore = kIgnore);

/// Lovasz extension of the Jaccard loss, averaged over the classes present in
/// `labels`. Per class c the errors |[y = c] - p(c)| are sorted in decreasing
/// order and weighted by the discrete gradient of the Jaccard loss.
Var lovasz_softmax(Var probs, const LabelMap& labels, int ignore = kIgnore);

/// CE + Lovasz on the change map.
Var bcd_loss(Var p_change, const LabelMap& y_change);
/// Change terms plus one half of the four land-cover terms.
Var scd_loss(Var p_t1, Var p_t2, Var p_change, const LabelMap& y_t1, const LabelMap& y_t2, const LabelMap& y_change);
/// Localization terms plus damage classification terms.
Var bda_loss(Var p_loc, Var p_clf, const LabelMap& y_loc, const LabelMap& y_clf);

}  // namespace stsmcd::losses
