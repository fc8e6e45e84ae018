#include "deshadow/shadowlab/experiments.hpp"

#include "deshadow/errors.hpp"
#include "deshadow/model/network.hpp"
#include "deshadow/shadowlab/synth.hpp"

namespace deshadow::shadowlab {

std::uint64_t sample_seed(std::uint64_t set_seed, std::size_t index) {
  // Spaced so that a regenerated sample (seed + 1) never lands on a sibling.
  return set_seed * 1'000'003ULL + 1000ULL * index;
}

std::vector<model::Sample> synth_dataset(std::uint64_t set_seed, std::size_t n, std::size_t size) {
  std::vector<model::Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(to_training(synth_shadow_sample(sample_seed(set_seed, i), size, size)));
  return out;
}

std::uint64_t heldout_seed(std::uint64_t train_seed) { return train_seed ^ 0x5EED0FF5E7ULL; }

MetricsReport evaluate(const model::ParamStore& params, const model::ModelConfig& config,
                       std::span<const model::Sample> data) {
  require(!data.empty(), "evaluate: empty evaluation set");
  std::vector<MetricsReport> reports;
  reports.reserve(data.size());
  for (const auto& s : data)
    reports.push_back(region_metrics(model::forward(params, s.input, s.mask, config), s.target, s.mask));
  return mean_report(reports);
}

AblationResult run_ablation(std::span<const model::GateMode> modes, const model::ModelConfig& config,
                            std::span<const model::Sample> train_data, std::span<const model::Sample> eval_data) {
  require(!modes.empty(), "run_ablation: no gate modes");
  AblationResult result;
  model::TrainState shared = model::init_state(config);
  result.stage1 = model::train_stage1(shared, train_data, config);
  const auto extractor = model::make_extractor(config);
  for (const model::GateMode mode : modes) {
    model::ModelConfig c = config;
    c.gates = mode;
    model::TrainState state = shared;
    AblationRow row{mode, model::train_stage2(state, train_data, c, extractor), {}};
    row.metrics = evaluate(state.params, c, eval_data);
    result.rows.push_back(std::move(row));
    result.states.push_back(std::move(state));
  }
  return result;
}

}  // namespace deshadow::shadowlab
