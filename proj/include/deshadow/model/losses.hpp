#pragma once

#include <optional>
#include <vector>

#include "deshadow/colorshift/colorshift.hpp"
#include "deshadow/model/config.hpp"
#include "deshadow/numerics/tape.hpp"

namespace deshadow::model {

// Mean of sqrt(d^2 + eps^2) over every entry, or sqrt(sum d^2 + eps^2) when global.
double charbonnier(const Tensor& prediction, const Tensor& target, double eps = 1e-3, bool global = false);
ad::Var charbonnier(ad::Tape& tape, ad::Var prediction, const Tensor& target, double eps = 1e-3, bool global = false);

// Everything the total loss needs besides the prediction. Images on 0..1.
struct LossTarget {
  Tensor target;
  Tensor mask;
  // Present unless the sample skips the contrastive term.
  struct Contrastive {
    Tensor positive;                // V(target * M)
    std::vector<Tensor> negatives;  // V(N_i / 255 * M)
    std::vector<double> weights;
  };
  std::optional<Contrastive> contrastive;
};

// Builds the negative set for a 0..1 target and caches the extractor features.
LossTarget make_loss_target(const Tensor& target, const Tensor& mask, const colorshift::FeatureExtractor& extractor,
                            std::size_t clusters, std::uint64_t seed);

struct LossParts {
  ad::Var total;
  ad::Var pixel;
  std::optional<ad::Var> contrastive;
};

// Charbonnier + lambda * ColorShift; the second term is dropped when lambda is 0
// or the sample has no usable negative set.
LossParts total_loss(ad::Tape& tape, ad::Var prediction, const LossTarget& target,
                     const colorshift::FeatureExtractor& extractor, const ModelConfig& config);

}  // namespace deshadow::model
