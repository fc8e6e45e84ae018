#include "deshadow/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "deshadow/errors.hpp"

namespace deshadow {

GradCheckResult finite_diff_check(const ScalarFn& f, std::span<const double> analytic,
                                  std::span<const double> params, const GradCheckOptions& options) {
  require(options.h >= 1e-7 && options.h <= 1e-3, "finite_diff_check step must lie in [1e-7, 1e-3]");
  require(analytic.size() == params.size(), "finite_diff_check: gradient and parameter sizes differ");
  std::vector<std::size_t> indices = options.indices;
  if (indices.empty()) {
    indices.resize(params.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
  }

  GradCheckResult result;
  std::vector<double> x(params.begin(), params.end());
  const double f0 = options.skip_kinks ? f(x) : 0.0;
  for (std::size_t idx : indices) {
    require(idx < x.size(), "finite_diff_check index out of range");
    const double orig = x[idx];
    x[idx] = orig + options.h;
    const double fp = f(x);
    x[idx] = orig - options.h;
    const double fm = f(x);
    x[idx] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      result.nonfinite_index = idx;
      return result;
    }
    const double central = (fp - fm) / (2.0 * options.h);
    if (options.skip_kinks) {
      const double fwd = (fp - f0) / options.h;
      const double bwd = (f0 - fm) / options.h;
      if (std::abs(fwd - bwd) > options.kink_tolerance * std::max(1.0, std::abs(central))) {
        ++result.skipped_kinks;
        continue;
      }
    }
    const double err = std::abs(analytic[idx] - central) / std::max(1.0, std::abs(analytic[idx]));
    ++result.checked;
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = idx;
    }
  }
  return result;
}

namespace {

ad::Var run(const TapeFn& f, ad::Tape& tape, std::span<const double> params, bool requires_grad) {
  ad::Var p = tape.leaf(Tensor({params.size()}, std::vector<double>(params.begin(), params.end())), requires_grad);
  ad::Var out = f(tape, p);
  require(tape.value(out).size() == 1, "gradient check function must return a scalar");
  return out;
}

}  // namespace

double evaluate(const TapeFn& f, std::span<const double> params) {
  ad::Tape tape;
  return tape.value(run(f, tape, params, false)).item();
}

std::vector<double> gradient(const TapeFn& f, std::span<const double> params) {
  ad::Tape tape;
  ad::Var p = tape.leaf(Tensor({params.size()}, std::vector<double>(params.begin(), params.end())));
  ad::Var out = f(tape, p);
  const auto grads = tape.backward(out);
  return grads[p].values();
}

GradCheckResult finite_diff_check(const TapeFn& f, std::span<const double> params,
                                  const GradCheckOptions& options) {
  const std::vector<double> analytic = gradient(f, params);
  return finite_diff_check([&](std::span<const double> x) { return evaluate(f, x); }, analytic, params, options);
}

}  // namespace deshadow
