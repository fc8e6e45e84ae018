#include "deshadow/model/train.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "deshadow/errors.hpp"
#include "deshadow/numerics/ops.hpp"

namespace deshadow::model {
namespace {

void require_dataset(std::span<const Sample> data) {
  require(!data.empty(), "training needs at least one sample");
  for (const Sample& s : data) {
    require_model_input(s.input, s.mask);
    require(s.target.shape() == s.input.shape(), "sample target and input shapes differ");
  }
}

void require_finite(double loss, int stage, std::size_t step, std::size_t sample) {
  if (std::isfinite(loss)) return;
  std::ostringstream os;
  os << "stage " << stage << " step " << step << " sample " << sample << ": loss is " << loss;
  throw NumericalError(os.str());
}

void reset_optimizer(TrainState& s) {
  s.optimizer = {};
  for (const auto& e : s.params.entries()) {
    s.optimizer.m.emplace_back(e.value.shape());
    s.optimizer.v.emplace_back(e.value.shape());
  }
}

// Runs `steps` optimizer steps; per_sample builds one sample's loss on a tape
// whose trainable leaves are selected by `trainable`.
using SampleLoss = std::function<ad::Var(ad::Tape&, const Bound&, std::size_t index)>;

std::vector<double> run_steps(TrainState& state, std::size_t n_samples, const ModelConfig& c, int stage,
                              std::size_t steps, double base_lr, const Bound::Predicate& trainable,
                              const SampleLoss& per_sample, const Progress& progress) {
  reset_optimizer(state);
  const std::size_t n_params = state.params.entries().size();
  const double batch = static_cast<double>(c.batch_size);
  std::vector<double> losses;
  losses.reserve(steps);
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<Tensor> acc(n_params);
    double loss = 0.0;
    for (std::size_t k = 0; k < c.batch_size; ++k) {
      const std::size_t index = (step * c.batch_size + k) % n_samples;
      ad::Tape tape;
      const Bound bound(tape, state.params, trainable);
      const ad::Var root = per_sample(tape, bound, index);
      const double value = tape.value(root).item();
      require_finite(value, stage, step, index);
      loss += value / batch;
      const ad::Gradients grads = tape.backward(root);
      for (std::size_t p = 0; p < n_params; ++p) {
        if (!trainable(state.params.entries()[p].name)) continue;
        Tensor g = grads[bound.vars()[p]];
        g *= 1.0 / batch;
        if (acc[p].empty()) acc[p] = std::move(g);
        else acc[p] += g;
      }
    }
    std::vector<const Tensor*> ptrs(n_params, nullptr);
    for (std::size_t p = 0; p < n_params; ++p) {
      if (acc[p].empty()) continue;
      if (!all_finite(acc[p])) {
        std::ostringstream os;
        os << "stage " << stage << " step " << step << ": non-finite gradient for " << state.params.entries()[p].name;
        throw NumericalError(os.str());
      }
      ptrs[p] = &acc[p];
    }
    adamw_step(state.params, state.optimizer, ptrs, cosine_lr(base_lr, std::min(c.lr_min, base_lr), step, steps), c);
    losses.push_back(loss);
    ++state.step;
    if (progress) progress(step, loss);
  }
  state.stage = stage;
  return losses;
}

}  // namespace

double cosine_lr(double base, double floor, std::size_t step, std::size_t total) {
  if (total <= 1) return base;
  const double t = static_cast<double>(std::min(step, total - 1)) / static_cast<double>(total - 1);
  return floor + 0.5 * (base - floor) * (1.0 + std::cos(std::numbers::pi * t));
}

void adamw_step(ParamStore& params, AdamWState& s, std::span<const Tensor* const> grads, double lr,
                const ModelConfig& c) {
  auto& entries = params.entries();
  require(grads.size() == entries.size() && s.m.size() == entries.size() && s.v.size() == entries.size(),
          "adamw_step: gradient and moment lists must match the parameter store");
  ++s.steps;
  const double t = static_cast<double>(s.steps);
  const double bc1 = 1.0 - std::pow(c.beta1, t), bc2 = 1.0 - std::pow(c.beta2, t);
  constexpr double kEps = 1e-8;
  for (std::size_t p = 0; p < entries.size(); ++p) {
    if (!grads[p]) continue;
    Tensor& w = entries[p].value;
    const Tensor& g = *grads[p];
    require(g.shape() == w.shape(), "adamw_step: gradient shape differs for " + entries[p].name);
    Tensor& m = s.m[p];
    Tensor& v = s.v[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      w[i] -= lr * c.weight_decay * w[i];
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + kEps);
    }
  }
}

TrainState init_state(const ModelConfig& config) {
  TrainState s{init_params(config), {}, 0, 0};
  reset_optimizer(s);
  return s;
}

double coarse_dataset_loss(const ParamStore& params, std::span<const Sample> data, const ModelConfig& c) {
  require_dataset(data);
  double total = 0.0;
  for (const Sample& s : data) {
    ad::Tape tape;
    const Bound b(tape, params);
    const auto out = coarse_deshadow(tape, b, tape.constant(s.input), s.mask, c);
    total += charbonnier(tape.value(out.prediction), s.target, c.epsilon, c.charbonnier_global);
  }
  return total / static_cast<double>(data.size());
}

StageReport train_stage1(TrainState& state, std::span<const Sample> data, const ModelConfig& c,
                         const Progress& progress) {
  require_dataset(data);
  StageReport r;
  r.initial_loss = coarse_dataset_loss(state.params, data, c);
  const SampleLoss loss = [&](ad::Tape& tape, const Bound& b, std::size_t i) {
    const auto out = coarse_deshadow(tape, b, tape.constant(data[i].input), data[i].mask, c);
    return charbonnier(tape, out.prediction, data[i].target, c.epsilon, c.charbonnier_global);
  };
  r.step_losses = run_steps(state, data.size(), c, 1, c.steps_stage1, c.lr_stage1, is_coarse, loss, progress);
  r.final_loss = coarse_dataset_loss(state.params, data, c);
  return r;
}

Stage2Cache prepare_stage2(const ParamStore& params, std::span<const Sample> data, const ModelConfig& c,
                           const colorshift::FeatureExtractor& extractor) {
  require_dataset(data);
  Stage2Cache cache;
  for (std::size_t i = 0; i < data.size(); ++i) {
    ad::Tape tape;
    const Bound b(tape, params);
    const auto out = coarse_deshadow(tape, b, tape.constant(data[i].input), data[i].mask, c);
    cache.features.push_back(tape.value(out.features));
    cache.coarse_predictions.push_back(tape.value(out.prediction));
    cache.targets.push_back(make_loss_target(data[i].target, data[i].mask, extractor, c.clusters, negative_seed(c, i)));
  }
  return cache;
}

namespace {

ad::Var cached_total_loss(ad::Tape& tape, const Bound& b, const Sample& s, std::size_t i, const Stage2Cache& cache,
                          const ModelConfig& c, const colorshift::FeatureExtractor& extractor) {
  const CoarseOutput coarse{tape.constant(cache.features[i]), tape.constant(cache.coarse_predictions[i])};
  const ad::Var pred = main_body(tape, b, tape.constant(s.input), s.mask, coarse, c);
  return total_loss(tape, pred, cache.targets[i], extractor, c).total;
}

}  // namespace

double total_dataset_loss(const ParamStore& params, std::span<const Sample> data, const Stage2Cache& cache,
                          const ModelConfig& c, const colorshift::FeatureExtractor& extractor) {
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    ad::Tape tape;
    const Bound b(tape, params);
    total += tape.value(cached_total_loss(tape, b, data[i], i, cache, c, extractor)).item();
  }
  return total / static_cast<double>(data.size());
}

StageReport train_stage2(TrainState& state, std::span<const Sample> data, const ModelConfig& c,
                         const colorshift::FeatureExtractor& extractor, const Progress& progress) {
  const Stage2Cache cache = prepare_stage2(state.params, data, c, extractor);
  StageReport r;
  r.initial_loss = total_dataset_loss(state.params, data, cache, c, extractor);
  const SampleLoss loss = [&](ad::Tape& tape, const Bound& b, std::size_t i) {
    return cached_total_loss(tape, b, data[i], i, cache, c, extractor);
  };
  const auto trainable = [](const std::string& name) { return !is_coarse(name); };
  r.step_losses = run_steps(state, data.size(), c, 2, c.steps_stage2, c.lr_stage2, trainable, loss, progress);
  r.final_loss = total_dataset_loss(state.params, data, cache, c, extractor);
  return r;
}

colorshift::FeatureExtractor make_extractor(const ModelConfig& c) {
  if (c.extractor_path.empty()) return colorshift::FeatureExtractor::seeded(c.extractor_seed);
  return colorshift::FeatureExtractor::from_file(c.extractor_path);
}

std::uint64_t negative_seed(const ModelConfig& c, std::size_t sample_index) {
  return c.seed * 0x9E3779B97F4A7C15ULL + sample_index;
}

Archive to_checkpoint(const TrainState& state, const ModelConfig& config) {
  Archive a;
  nlohmann::ordered_json header{{"format", "deshadow-checkpoint"},
                                {"config", to_json(config)},
                                {"stage", state.stage},
                                {"step", state.step},
                                {"optimizer_steps", state.optimizer.steps}};
  a.header_json = header.dump();
  const auto& entries = state.params.entries();
  for (const auto& e : entries) a.tensors.push_back({"param/" + e.name, e.value});
  if (state.optimizer.m.size() == entries.size()) {
    for (std::size_t p = 0; p < entries.size(); ++p) a.tensors.push_back({"adam.m/" + entries[p].name, state.optimizer.m[p]});
    for (std::size_t p = 0; p < entries.size(); ++p) a.tensors.push_back({"adam.v/" + entries[p].name, state.optimizer.v[p]});
  }
  return a;
}

Checkpoint from_checkpoint(const Archive& archive) {
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(archive.header_json);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (!header.is_object() || header.value("format", "") != "deshadow-checkpoint" || !header.contains("config"))
    throw ConfigError("archive is not a deshadow checkpoint");
  Checkpoint ck{config_from_json(header.at("config")), {}};
  ck.state = init_state(ck.config);
  try {
    ck.state.stage = header.value("stage", 0);
    ck.state.step = header.value("step", std::size_t{0});
    ck.state.optimizer.steps = header.value("optimizer_steps", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint header: ") + e.what());
  }
  auto& entries = ck.state.params.entries();
  std::size_t expected = entries.size();
  for (std::size_t p = 0; p < entries.size(); ++p) {
    const Tensor* t = archive.find("param/" + entries[p].name);
    if (!t) throw ConfigError("checkpoint is missing parameter " + entries[p].name);
    if (t->shape() != entries[p].value.shape())
      throw ConfigError("checkpoint parameter " + entries[p].name + " has shape " + shape_string(t->shape()) +
                        ", expected " + shape_string(entries[p].value.shape()));
    entries[p].value = *t;
    const Tensor* m = archive.find("adam.m/" + entries[p].name);
    const Tensor* v = archive.find("adam.v/" + entries[p].name);
    if (m && v && m->shape() == t->shape() && v->shape() == t->shape()) {
      ck.state.optimizer.m[p] = *m;
      ck.state.optimizer.v[p] = *v;
      expected += 2;
    }
  }
  if (archive.tensors.size() != expected)
    throw ConfigError("checkpoint holds tensors that do not belong to this configuration");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const ModelConfig& config) {
  write_archive(path, to_checkpoint(state, config));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return from_checkpoint(read_archive(path)); }

}  // namespace deshadow::model
