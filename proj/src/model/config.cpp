#include "deshadow/model/config.hpp"

#include <set>

#include "deshadow/errors.hpp"

namespace deshadow::model {

GateMode parse_gate_mode(const std::string& name) {
  if (name == "baseline") return GateMode::kBaseline;
  if (name == "gh") return GateMode::kHorizontal;
  if (name == "gv") return GateMode::kVertical;
  if (name == "full") return GateMode::kFull;
  if (name == "no-offset") return GateMode::kNoOffset;
  throw ConfigError("unknown gate mode '" + name + "' (expected baseline, gh, gv, full or no-offset)");
}

std::string to_string(GateMode mode) {
  switch (mode) {
    case GateMode::kBaseline: return "baseline";
    case GateMode::kHorizontal: return "gh";
    case GateMode::kVertical: return "gv";
    case GateMode::kFull: return "full";
    case GateMode::kNoOffset: return "no-offset";
  }
  return "full";
}

void ModelConfig::validate() const {
  auto positive = [](bool ok, const char* field) {
    if (!ok) throw ConfigError(std::string("config: ") + field + " must be positive");
  };
  positive(channels > 0, "channels");
  positive(state_dim > 0, "state_dim");
  positive(expand > 0, "expand");
  positive(blocks_per_level > 0, "blocks_per_level");
  positive(epsilon > 0.0, "epsilon");
  positive(clusters > 0, "clusters");
  positive(batch_size > 0, "batch_size");
  if (!(lambda >= 0.0)) throw ConfigError("config: lambda must be non-negative");
  if (!(lr_stage1 >= 0.0) || !(lr_stage2 >= 0.0) || !(lr_min >= 0.0))
    throw ConfigError("config: learning rates must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("config: betas must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("config: weight_decay must be non-negative");
}

ModelConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  ModelConfig c;
  static const std::set<std::string> known = {
      "channels", "state_dim", "expand", "blocks_per_level", "share_scan_params", "gates",
      "normalize_gate_by_count", "lambda", "epsilon", "charbonnier_global", "clusters", "extractor_seed",
      "extractor_path", "lr_stage1", "lr_stage2", "lr_min", "beta1", "beta2", "weight_decay", "steps_stage1",
      "steps_stage2", "batch_size", "seed"};
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError("config: unknown key '" + key + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("channels", c.channels);
    get("state_dim", c.state_dim);
    get("expand", c.expand);
    get("blocks_per_level", c.blocks_per_level);
    get("share_scan_params", c.share_scan_params);
    if (j.contains("gates")) c.gates = parse_gate_mode(j.at("gates").get<std::string>());
    get("normalize_gate_by_count", c.normalize_gate_by_count);
    get("lambda", c.lambda);
    get("epsilon", c.epsilon);
    get("charbonnier_global", c.charbonnier_global);
    get("clusters", c.clusters);
    get("extractor_seed", c.extractor_seed);
    get("extractor_path", c.extractor_path);
    get("lr_stage1", c.lr_stage1);
    get("lr_stage2", c.lr_stage2);
    get("lr_min", c.lr_min);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("weight_decay", c.weight_decay);
    get("steps_stage1", c.steps_stage1);
    get("steps_stage2", c.steps_stage2);
    get("batch_size", c.batch_size);
    get("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {{"channels", c.channels},
          {"state_dim", c.state_dim},
          {"expand", c.expand},
          {"blocks_per_level", c.blocks_per_level},
          {"share_scan_params", c.share_scan_params},
          {"gates", to_string(c.gates)},
          {"normalize_gate_by_count", c.normalize_gate_by_count},
          {"lambda", c.lambda},
          {"epsilon", c.epsilon},
          {"charbonnier_global", c.charbonnier_global},
          {"clusters", c.clusters},
          {"extractor_seed", c.extractor_seed},
          {"extractor_path", c.extractor_path},
          {"lr_stage1", c.lr_stage1},
          {"lr_stage2", c.lr_stage2},
          {"lr_min", c.lr_min},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"weight_decay", c.weight_decay},
          {"steps_stage1", c.steps_stage1},
          {"steps_stage2", c.steps_stage2},
          {"batch_size", c.batch_size},
          {"seed", c.seed}};
}

}  // namespace deshadow::model
