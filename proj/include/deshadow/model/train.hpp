#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "deshadow/colorshift/colorshift.hpp"
#include "deshadow/model/config.hpp"
#include "deshadow/model/losses.hpp"
#include "deshadow/model/network.hpp"

namespace deshadow::model {

// One training triple on the 0..1 scale.
struct Sample {
  Tensor input;   // 3 x H x W
  Tensor mask;    // H x W, binary
  Tensor target;  // 3 x H x W
};

struct AdamWState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t steps = 0;
};

// Cosine decay from base at step 0 to floor at step total - 1.
double cosine_lr(double base, double floor, std::size_t step, std::size_t total);

// Decoupled weight decay then the bias-corrected adaptive step. grads is
// aligned with the store; null entries are left untouched.
void adamw_step(ParamStore& params, AdamWState& state, std::span<const Tensor* const> grads, double lr,
                const ModelConfig& config);

struct TrainState {
  ParamStore params;
  AdamWState optimizer;
  int stage = 0;  // last completed stage
  std::size_t step = 0;
};

TrainState init_state(const ModelConfig& config);

struct StageReport {
  std::vector<double> step_losses;  // batch mean per step
  double initial_loss = 0.0;        // dataset mean before the stage
  double final_loss = 0.0;          // dataset mean after the stage
};

using Progress = std::function<void(std::size_t step, double loss)>;

// Coarse unit only, Charbonnier on the coarse prediction.
StageReport train_stage1(TrainState& state, std::span<const Sample> data, const ModelConfig& config,
                         const Progress& progress = nullptr);

// Frozen coarse unit's outputs and each sample's loss target, computed once.
struct Stage2Cache {
  std::vector<Tensor> features;
  std::vector<Tensor> coarse_predictions;
  std::vector<LossTarget> targets;
};

Stage2Cache prepare_stage2(const ParamStore& params, std::span<const Sample> data, const ModelConfig& config,
                           const colorshift::FeatureExtractor& extractor);

// Main body on total_loss with the coarse unit frozen.
StageReport train_stage2(TrainState& state, std::span<const Sample> data, const ModelConfig& config,
                         const colorshift::FeatureExtractor& extractor, const Progress& progress = nullptr);

double coarse_dataset_loss(const ParamStore& params, std::span<const Sample> data, const ModelConfig& config);
double total_dataset_loss(const ParamStore& params, std::span<const Sample> data, const Stage2Cache& cache,
                          const ModelConfig& config, const colorshift::FeatureExtractor& extractor);

colorshift::FeatureExtractor make_extractor(const ModelConfig& config);

// Seed of the negative-set pipeline for the sample at this dataset position.
std::uint64_t negative_seed(const ModelConfig& config, std::size_t sample_index);

// Versioned archive: config echo and stage in the header, "param/<name>" blobs,
// optimizer moments under "adam.m/<name>" and "adam.v/<name>".
Archive to_checkpoint(const TrainState& state, const ModelConfig& config);
struct Checkpoint {
  ModelConfig config;
  TrainState state;
};
// Every parameter shape is validated against the echoed config (ConfigError on mismatch).
Checkpoint from_checkpoint(const Archive& archive);
void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const ModelConfig& config);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace deshadow::model
