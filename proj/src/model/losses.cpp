#include "deshadow/model/losses.hpp"

#include <cmath>

#include "deshadow/errors.hpp"
#include "deshadow/numerics/ops.hpp"

namespace deshadow::model {
namespace {

void check(const Tensor& prediction, const Tensor& target, double eps) {
  require(prediction.shape() == target.shape(), "charbonnier: prediction " + shape_string(prediction.shape()) +
                                                     " and target " + shape_string(target.shape()) + " differ");
  require(eps > 0.0, "charbonnier: eps must be positive");
  require(prediction.size() > 0, "charbonnier: empty input");
}

}  // namespace

double charbonnier(const Tensor& prediction, const Tensor& target, double eps, bool global) {
  check(prediction, target, eps);
  // The per-pixel mean accumulates the excess over eps, so zero difference gives eps exactly.
  double acc = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double d = prediction[i] - target[i];
    acc += global ? d * d : std::sqrt(d * d + eps * eps) - eps;
  }
  return global ? std::sqrt(acc + eps * eps) : eps + acc / static_cast<double>(prediction.size());
}

ad::Var charbonnier(ad::Tape& tape, ad::Var prediction, const Tensor& target, double eps, bool global) {
  const Tensor& pred = tape.value(prediction);
  const double value = charbonnier(pred, target, eps, global);
  return tape.record(Tensor::scalar(value), {prediction}, [target, eps, global, value](const ad::BackwardArgs& b) {
    const Tensor& p = *b.in[0];
    Tensor& g = *b.grad_in[0];
    const double go = b.grad_out.item();
    const double n = static_cast<double>(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = p[i] - target[i];
      g[i] += go * (global ? d / value : d / (std::sqrt(d * d + eps * eps) * n));
    }
  });
}

LossTarget make_loss_target(const Tensor& target, const Tensor& mask, const colorshift::FeatureExtractor& extractor,
                            std::size_t clusters, std::uint64_t seed) {
  LossTarget lt{target, mask, std::nullopt};
  Tensor scaled = target;
  scaled *= 255.0;
  auto outcome = colorshift::build_negative_set(scaled, mask, clusters, seed, &extractor);
  if (!outcome.set) return lt;
  lt.contrastive = LossTarget::Contrastive{extractor.extract(target, mask), std::move(outcome.set->features),
                                           std::move(outcome.set->weights)};
  return lt;
}

LossParts total_loss(ad::Tape& tape, ad::Var prediction, const LossTarget& target,
                     const colorshift::FeatureExtractor& extractor, const ModelConfig& config) {
  LossParts parts;
  parts.pixel = charbonnier(tape, prediction, target.target, config.epsilon, config.charbonnier_global);
  parts.total = parts.pixel;
  if (config.lambda == 0.0 || !target.contrastive) return parts;
  const auto& cs = *target.contrastive;
  ad::Var anchor = extractor.extract(tape, prediction, target.mask);
  parts.contrastive = colorshift::colorshift_loss(tape, anchor, cs.positive, cs.negatives, cs.weights);
  parts.total = ad::add(tape, parts.pixel, ad::scale(tape, *parts.contrastive, config.lambda));
  return parts;
}

}  // namespace deshadow::model
