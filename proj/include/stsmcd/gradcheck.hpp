#pragma once

// Central finite-difference checks of reverse-mode gradients.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stsmcd/autodiff.hpp"

namespace stsmcd::gradcheck {

struct Options {
  double step = 1e-4;
  double tolerance = 1e-3;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  std::size_t samples = 64;  // coordinates checked; all of them if fewer exist
  std::uint64_t seed = 1;
};

struct Coordinate {
  std::size_t leaf = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct Report {
  bool passed = false;
  bool skipped = false;
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  std::vector<Coordinate> coordinates;
  std::vector<std::string> warnings;
};

/// Builds the scalar loss from the current parameter values. Leaves must be
/// bound inside the builder through Graph::param.
using LossBuilder = std::function<Var(Graph&)>;

/// Compares the reverse-mode gradient of the built loss with respect to
/// `leaves` against central differences on a seeded sample of coordinates.
/// Throws ShapeError if the loss is not a scalar. A graph in which a
/// non-differentiable node consumes a gradient-carrying value is skipped with
/// a warning.
Report check(const std::vector<Parameter*>& leaves, const LossBuilder& build, const Options& options = {});

/// Scalarizes a tensor output with a fixed pseudo-random weighting so that
/// every output coordinate contributes to the checked loss.
Var random_projection(Var y, std::uint64_t seed);

/// silu with a deliberately wrong derivative (the x*s*(1-s) term is dropped).
/// Used as a negative control: a correct checker must reject it.
Var corrupted_silu(Var x);

}  // namespace stsmcd::gradcheck
