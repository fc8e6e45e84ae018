#pragma once

#include "deshadow/numerics/random.hpp"
#include "deshadow/numerics/tape.hpp"
#include "deshadow/numerics/tensor.hpp"

// Shadow-aware gate maps. Each non-shadow query pixel averages its similarity to
// the warped shadow keys of its own row. The vertical map runs the same pipeline
// on transposed axes.
namespace deshadow::crossgate {

// Weights of one directional pipeline.
struct GateWeights {
  Tensor q_weight;       // C' x C x 1 x 1
  Tensor q_bias;         // C'
  Tensor k_weight;       // C' x C x 1 x 1
  Tensor k_bias;         // C'
  Tensor offset_weight;  // 2 x C' x 3 x 3
  Tensor offset_bias;    // 2

  std::size_t in_channels() const { return q_weight.dim(1); }
  std::size_t qk_channels() const { return q_weight.dim(0); }

  // Projections ~ N(0, 1/C); the offset predictor starts near zero so early
  // warps are small but off the integer lattice.
  static GateWeights init(std::size_t in_channels, std::size_t qk_channels, Rng& rng);
};

struct GateWeightVars {
  ad::Var q_weight, q_bias, k_weight, k_bias, offset_weight, offset_bias;
};

GateWeightVars bind(ad::Tape& tape, const GateWeights& w, bool requires_grad = true);

struct GateOptions {
  // false reproduces fixed row/column sampling (no learned warp).
  bool use_offsets = true;
  // Divide the aggregated response by the number of cross-region pairs at each
  // position instead of by the row length.
  bool normalize_by_count = false;
  // Offset bound as a fraction of the scanned row length.
  double max_disp_fraction = 0.25;
};

// Offset bound for a frame of the given width: width / 4.
double default_max_disp(std::size_t width);

// 1x1 projections of F (C x H x W) into Q and K (C' x H x W).
struct QueryKey {
  Tensor q;
  Tensor k;
};
QueryKey project_qk(const Tensor& features, const GateWeights& w);

// beta = max_disp * tanh(conv3x3(Q)); channel 0 is the x displacement, 1 the y displacement.
Tensor predict_offsets(const Tensor& q, const GateWeights& w, double max_disp);

// Warps K and M by identity + beta. The warped mask is thresholded at 0.5.
struct Warped {
  Tensor k_hat;  // C' x H x W
  Tensor m_hat;  // H x W, binary
};
Warped deform_sample(const Tensor& k, const Tensor& mask, const Tensor& offsets);

// delta[r, i, j] = <Q[:, i, j], K_hat[:, i, r]>, shape W x H x W.
Tensor rowwise_similarity(const Tensor& q, const Tensor& k_hat);

// delta * (M[i, j] XOR M_hat[i, r]). Non-binary masks are a ContractViolation.
Tensor cross_region_gate(const Tensor& similarity, const Tensor& mask, const Tensor& m_hat);

// Mean over the key axis: W x H x W -> H x W.
Tensor aggregate_relevance(const Tensor& gated);

// relevance * (1 - M).
Tensor nonshadow_modulation(const Tensor& relevance, const Tensor& mask);

struct GateMaps {
  Tensor horizontal;  // H x W
  Tensor vertical;    // H x W
};

// Horizontal gate map of a C x H x W feature map and binary H x W mask.
Tensor horizontal_gate(const Tensor& features, const Tensor& mask, const GateWeights& w,
                       const GateOptions& options = {});
GateMaps crossgate_maps(const Tensor& features, const Tensor& mask, const GateWeights& horizontal,
                        const GateWeights& vertical, const GateOptions& options = {});

// Differentiable versions. The mask is a constant; gradients reach the features,
// the projections and the offset predictor.
ad::Var horizontal_gate(ad::Tape& tape, ad::Var features, const Tensor& mask, const GateWeightVars& w,
                        const GateOptions& options = {});

struct GateMapVars {
  ad::Var horizontal;
  ad::Var vertical;
};
GateMapVars crossgate_maps(ad::Tape& tape, ad::Var features, const Tensor& mask, const GateWeightVars& horizontal,
                           const GateWeightVars& vertical, const GateOptions& options = {});

// Fused similarity -> cross-region filter -> aggregation -> non-shadow retention.
// q, k_hat: C' x H x W; mask, m_hat: binary H x W.
ad::Var gate_response(ad::Tape& tape, ad::Var q, ad::Var k_hat, const Tensor& mask, const Tensor& m_hat,
                      bool normalize_by_count = false);

// Per-map min-max normalization to [0, 255] for inspection dumps. Constant maps become 0.
Tensor to_display(const Tensor& map);

}  // namespace deshadow::crossgate
