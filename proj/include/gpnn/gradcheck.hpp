#pragma once

#include <functional>
#include <span>

#include "gpnn/autodiff.hpp"

namespace gpnn {

struct GradCheckReport {
  double max_rel_error = 0.0;
  Index checked = 0;
  /// Coordinates whose ±eps perturbation changed a discrete choice
  /// (relu sign, pooling winner, pointer selection).
  Index skipped = 0;
};

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` must rebuild its forward pass from the current values of `leaves`
/// and return a scalar. The error of one coordinate is
/// |analytic - numeric| / max(1, |numeric|); the report holds the maximum.
GradCheckReport finite_difference_check(const std::function<Var()>& f, std::span<Var> leaves,
                                        double eps = 1e-3);

}  // namespace gpnn
