#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "deshadow/model/config.hpp"
#include "deshadow/model/train.hpp"
#include "deshadow/shadowlab/metrics.hpp"

namespace deshadow::shadowlab {

// Seed of the i-th sample of a synthetic set.
std::uint64_t sample_seed(std::uint64_t set_seed, std::size_t index);

// n square samples of side `size`.
std::vector<model::Sample> synth_dataset(std::uint64_t set_seed, std::size_t n, std::size_t size);

// Seed of the held-out evaluation set belonging to a training seed.
std::uint64_t heldout_seed(std::uint64_t train_seed);

// Mean region metrics of the model's predictions over a set.
MetricsReport evaluate(const model::ParamStore& params, const model::ModelConfig& config,
                       std::span<const model::Sample> data);

struct AblationRow {
  model::GateMode mode;
  model::StageReport stage2;
  MetricsReport metrics;
};

struct AblationResult {
  model::StageReport stage1;  // shared by every row
  std::vector<AblationRow> rows;
  std::vector<model::TrainState> states;  // aligned with rows
};

// Stage 1 once under config, then stage 2 per gate mode from the same
// stage-1 state, each evaluated on eval_data.
AblationResult run_ablation(std::span<const model::GateMode> modes, const model::ModelConfig& config,
                            std::span<const model::Sample> train_data, std::span<const model::Sample> eval_data);

}  // namespace deshadow::shadowlab
