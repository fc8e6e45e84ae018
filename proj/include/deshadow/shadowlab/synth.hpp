#pragma once

#include <array>
#include <cstdint>
#include <optional>

#include "deshadow/model/train.hpp"
#include "deshadow/numerics/tensor.hpp"

namespace deshadow::shadowlab {

struct ShadowSample {
  Tensor input;   // 3 x H x W on 0..1, multiples of 1/255
  Tensor mask;    // H x W, binary
  Tensor target;  // 3 x H x W on 0..1, multiples of 1/255
  std::uint64_t seed = 0;  // seed that produced this sample (may differ from the request after regeneration)
};

struct SynthOptions {
  // Per-channel shadow attenuation and offset; drawn from [0.2, 0.6] and [0, 0.05] when absent.
  std::optional<std::array<double, 3>> gain;
  std::optional<std::array<double, 3>> offset;
};

inline constexpr double kMinCoverage = 0.05;
inline constexpr double kMaxCoverage = 0.60;

// H and W must be multiples of 4 and at least 16.
ShadowSample synth_shadow_sample(std::uint64_t seed, std::size_t height, std::size_t width,
                                 const SynthOptions& options = {});

model::Sample to_training(const ShadowSample& s);

}  // namespace deshadow::shadowlab
