#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace deshadow::shadowlab {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  bool passed = false;
};

inline constexpr double kUnitTolerance = 1e-4;
inline constexpr double kEndToEndTolerance = 1e-3;

// Central-difference checks of every differentiable building block on random
// inputs drawn from seed, plus a sampled end-to-end total-loss check at 8 x 8.
// Order: softplus, conv2d, layer_norm, bilinear_sample_2d, selective_scan,
// crossgate, charbonnier, colorshift_loss, total_loss.
std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed);

}  // namespace deshadow::shadowlab
