#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "deshadow/crossgate/crossgate.hpp"
#include "deshadow/model/config.hpp"
#include "deshadow/numerics/archive.hpp"
#include "deshadow/numerics/tape.hpp"
#include "deshadow/ssm/ssm.hpp"

namespace deshadow::model {

// Named parameters in insertion order. Names of the coarse unit start with
// "coarse.", the rest with "main.".
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t index(const std::string& name) const;
  const Tensor& get(const std::string& name) const { return entries_[index(name)].value; }
  Tensor& get(const std::string& name) { return entries_[index(name)].value; }
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<NamedTensor>& entries() { return entries_; }
  std::size_t scalar_count() const;

 private:
  std::vector<NamedTensor> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline bool is_coarse(const std::string& name) { return name.starts_with("coarse."); }

// Tape leaves for every parameter of a store, aligned with its entries.
class Bound {
 public:
  using Predicate = std::function<bool(const std::string&)>;
  // trainable == nullptr binds everything as constants.
  Bound(ad::Tape& tape, const ParamStore& store, const Predicate& trainable = nullptr);
  ad::Var operator()(const std::string& name) const { return vars_[store_->index(name)]; }
  const std::vector<ad::Var>& vars() const { return vars_; }

 private:
  const ParamStore* store_;
  std::vector<ad::Var> vars_;
};

// Fresh parameters drawn from config.seed.
ParamStore init_params(const ModelConfig& config);

// Block parameter names under a prefix, for a block of the given width.
void add_block_params(ParamStore& store, const std::string& prefix, std::size_t channels, const ModelConfig& config,
                      Rng& rng);

// layer_norm -> 1x1 expand -> depthwise 3x3 -> SiLU -> 4-way scan -> 1x1 contract -> residual.
ad::Var scan_block(ad::Tape& tape, const Bound& p, const std::string& prefix, ad::Var x,
                    const ssm::DirectionalGateVars& gates, const ModelConfig& config);

struct CoarseOutput {
  ad::Var features;    // C x H x W
  ad::Var prediction;  // 3 x H x W
};
// input: 3 x H x W on 0..1, mask: binary H x W.
CoarseOutput coarse_deshadow(ad::Tape& tape, const Bound& p, ad::Var input, const Tensor& mask,
                             const ModelConfig& config);

// Gate maps for the configured mode; absent entries are not injected.
ssm::DirectionalGateVars gate_maps(ad::Tape& tape, const Bound& p, ad::Var features, const Tensor& mask,
                                   const ModelConfig& config);

// Encoder-decoder on top of the coarse output. Result is clamped to [0, 1].
ad::Var main_body(ad::Tape& tape, const Bound& p, ad::Var input, const Tensor& mask, const CoarseOutput& coarse,
                  const ModelConfig& config);

ad::Var forward(ad::Tape& tape, const Bound& p, ad::Var input, const Tensor& mask, const ModelConfig& config);

// Inference without gradient bookkeeping.
Tensor forward(const ParamStore& params, const Tensor& input, const Tensor& mask, const ModelConfig& config);

// Horizontal and vertical maps actually injected (zeros where the mode omits one).
crossgate::GateMaps inspect_gates(const ParamStore& params, const Tensor& input, const Tensor& mask,
                                  const ModelConfig& config);

void require_model_input(const Tensor& input, const Tensor& mask);

}  // namespace deshadow::model
