#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "deshadow/numerics/tape.hpp"

namespace deshadow {

using ScalarFn = std::function<double(std::span<const double>)>;

// Builds a scalar on a fresh tape from a flat parameter leaf.
using TapeFn = std::function<ad::Var(ad::Tape&, ad::Var params)>;

struct GradCheckOptions {
  double h = 1e-6;
  // Coordinates to probe; empty means all.
  std::vector<std::size_t> indices;
  // Skip coordinates where one-sided differences disagree (a kink within h).
  bool skip_kinks = false;
  double kink_tolerance = 1e-4;
};

struct GradCheckResult {
  // max |analytic - central| / max(1, |analytic|) over probed coordinates.
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  // Set when f was non-finite at a perturbed point; the check has failed.
  std::optional<std::size_t> nonfinite_index;

  bool passed(double tolerance) const { return !nonfinite_index && max_rel_error < tolerance; }
};

GradCheckResult finite_diff_check(const ScalarFn& f, std::span<const double> analytic,
                                  std::span<const double> params, const GradCheckOptions& options = {});

// Convenience form: the analytic gradient comes from Tape::backward.
GradCheckResult finite_diff_check(const TapeFn& f, std::span<const double> params,
                                  const GradCheckOptions& options = {});

// Evaluates a TapeFn at params without recording gradients.
double evaluate(const TapeFn& f, std::span<const double> params);
std::vector<double> gradient(const TapeFn& f, std::span<const double> params);

}  // namespace deshadow
