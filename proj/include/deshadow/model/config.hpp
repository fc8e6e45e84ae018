#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

namespace deshadow::model {

inline constexpr std::size_t kCoarseBlocks = 2;

// Which gate maps reach the main-body scans.
enum class GateMode { kBaseline, kHorizontal, kVertical, kFull, kNoOffset };

GateMode parse_gate_mode(const std::string& name);  // baseline | gh | gv | full | no-offset
std::string to_string(GateMode mode);

struct ModelConfig {
  std::size_t channels = 16;
  std::size_t state_dim = 4;
  std::size_t expand = 1;
  // Blocks at each resolution on each side of the encoder-decoder.
  std::size_t blocks_per_level = 1;
  bool share_scan_params = false;
  GateMode gates = GateMode::kFull;
  bool normalize_gate_by_count = false;

  double lambda = 0.01;
  double epsilon = 1e-3;
  bool charbonnier_global = false;
  std::size_t clusters = 10;
  std::uint64_t extractor_seed = 0;
  std::string extractor_path;  // empty: seeded default

  double lr_stage1 = 1e-2;
  double lr_stage2 = 5e-3;
  double lr_min = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  std::size_t steps_stage1 = 200;
  std::size_t steps_stage2 = 200;
  std::size_t batch_size = 2;
  std::uint64_t seed = 0;

  // Throws ConfigError when a field is out of range.
  void validate() const;
};

// Unknown keys and wrongly typed values raise ConfigError. Missing keys keep defaults.
ModelConfig config_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const ModelConfig& c);

}  // namespace deshadow::model
