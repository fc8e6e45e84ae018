#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "deshadow/numerics/random.hpp"
#include "deshadow/numerics/tape.hpp"
#include "deshadow/numerics/tensor.hpp"

namespace deshadow::ssm {

// |dt * A| below this switches the input coefficient to its two-term series.
inline constexpr double kSeriesThreshold = 1e-6;

// Continuous-time parameters of one selective scan over C channels with a
// Z-dimensional diagonal state. The transition is stored as a_log with
// A = -exp(a_log), so A < 0 for every finite value.
struct ContinuousParams {
  Tensor a_log;        // Z
  Tensor b_proj;       // Z x C  (input -> B_t)
  Tensor c_proj;       // Z x C  (input -> C_t)
  Tensor delta_proj;   // C x C  (input -> pre-softplus step)
  Tensor delta_bias;   // C      (step bias)
  Tensor gate_proj;    // C x 1  (gate signal -> pre-softplus step)
  Tensor feedthrough;  // C      (D)

  std::size_t channels() const { return feedthrough.size(); }
  std::size_t state_dim() const { return a_log.size(); }
  std::vector<double> transition() const;  // A

  // A = -(1..Z); softplus(delta_bias) log-uniform in [0.001, 0.1]; D = 1.
  static ContinuousParams init(std::size_t channels, std::size_t state_dim, Rng& rng);
};

// Tape handles for the fields of ContinuousParams.
struct ParamVars {
  ad::Var a_log, b_proj, c_proj, delta_proj, delta_bias, gate_proj, feedthrough;
};

ParamVars bind(ad::Tape& tape, const ContinuousParams& params, bool requires_grad = true);

struct Discretized {
  double a_bar;
  double b_bar;
};

// Zero-order hold for one diagonal entry. Throws ContractViolation for delta <= 0.
Discretized discretize_zoh(double a, double b, double delta);

// Discrete parameters of one timestep. a_bar and b_bar are C x Z since the
// step size is per channel.
struct ScanStep {
  Tensor a_bar;  // C x Z
  Tensor b_bar;  // C x Z
  Tensor c;      // Z
  Tensor delta;  // C
  Tensor d;      // C
};

ScanStep selective_params(std::span<const double> x_t, const ContinuousParams& params, double gate_t = 0.0);

// Recurrent selective scan over x (L x C) with optional per-step gate (L).
Tensor selective_scan(const Tensor& x, const ContinuousParams& params,
                      const std::optional<Tensor>& gates = std::nullopt);

struct ScanTrace {
  Tensor y;       // L x C
  Tensor states;  // L x C x Z
};
ScanTrace selective_scan_trace(const Tensor& x, const ContinuousParams& params,
                               const std::optional<Tensor>& gates = std::nullopt);

// Causal mixing-matrix evaluation of the same map, O(L^2). Test oracle; L <= 512.
inline constexpr std::size_t kOracleMaxLength = 512;
Tensor scan_matrix_oracle(const Tensor& x, const ContinuousParams& params,
                          const std::optional<Tensor>& gates = std::nullopt);

// Differentiable scan. x: L x C, gates: L x 1.
ad::Var selective_scan(ad::Tape& tape, ad::Var x, const ParamVars& params,
                       std::optional<ad::Var> gates = std::nullopt);

// Fused recurrence with ZOH inside: x, delta: L x C; b, c: L x Z; a: Z; d: C.
ad::Var scan_core(ad::Tape& tape, ad::Var x, ad::Var delta, ad::Var b, ad::Var c, ad::Var a, ad::Var d);

enum class ScanOrder { kRowForward, kRowReverse, kColForward, kColReverse };
inline constexpr std::array<ScanOrder, 4> kScanOrders = {ScanOrder::kRowForward, ScanOrder::kRowReverse,
                                                        ScanOrder::kColForward, ScanOrder::kColReverse};

inline bool is_horizontal(ScanOrder o) { return o == ScanOrder::kRowForward || o == ScanOrder::kRowReverse; }

// Flat spatial index (i * W + j) visited at step t.
std::size_t spatial_index(ScanOrder order, std::size_t t, std::size_t height, std::size_t width);

// C x H x W image <-> L x C sequence in the given order.
Tensor to_sequence(const Tensor& image, ScanOrder order);
Tensor from_sequence(const Tensor& seq, ScanOrder order, std::size_t height, std::size_t width);
ad::Var to_sequence(ad::Tape& tape, ad::Var image, ScanOrder order);
ad::Var from_sequence(ad::Tape& tape, ad::Var seq, ScanOrder order, std::size_t height, std::size_t width);

// Per-direction modulation signals (H x W). The horizontal map drives both
// row-major paths, the vertical map both column-major paths.
struct DirectionalGates {
  std::optional<Tensor> horizontal;
  std::optional<Tensor> vertical;
};

struct DirectionalGateVars {
  std::optional<ad::Var> horizontal;
  std::optional<ad::Var> vertical;
};

// Sum of the four directional scans of a C x H x W feature map, in kScanOrders order.
Tensor scan_image_4dir(const Tensor& features, const std::array<ContinuousParams, 4>& params,
                       const DirectionalGates& gates = {});
ad::Var scan_image_4dir(ad::Tape& tape, ad::Var features, const std::array<ParamVars, 4>& params,
                        const DirectionalGateVars& gates = {});

}  // namespace deshadow::ssm
