#include "deshadow/crossgate/crossgate.hpp"

#include <algorithm>
#include <cmath>

#include "deshadow/errors.hpp"
#include "deshadow/numerics/kernels.hpp"
#include "deshadow/numerics/ops.hpp"

namespace deshadow::crossgate {
namespace {

void require_binary(const Tensor& m, const char* what) {
  for (double v : m.data()) require(v == 0.0 || v == 1.0, std::string(what) + ": mask must be binary");
}

void require_mask_shape(const Tensor& m, std::size_t h, std::size_t w, const char* what) {
  require(m.rank() == 2 && m.dim(0) == h && m.dim(1) == w,
          std::string(what) + ": mask shape " + shape_string(m.shape()) + " does not match the feature map");
}

Tensor threshold_half(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data()) v = v >= 0.5 ? 1.0 : 0.0;
  return out;
}

// Per-position factor applied to the masked row sum; zero at shadow queries.
Tensor response_scale(const Tensor& mask, const Tensor& m_hat, bool by_count) {
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  Tensor s({h, w});
  for (std::size_t i = 0; i < h; ++i) {
    std::size_t cross = 0;
    for (std::size_t r = 0; r < w; ++r) cross += m_hat.at(i, r) == 0.0 ? 0 : 1;
    for (std::size_t j = 0; j < w; ++j) {
      if (mask.at(i, j) != 0.0) continue;
      // Query is non-shadow, so the XOR keeps exactly the shadow keys.
      const double n = by_count ? static_cast<double>(std::max<std::size_t>(cross, 1)) : static_cast<double>(w);
      s.at(i, j) = 1.0 / n;
    }
  }
  return s;
}

}  // namespace

GateWeights GateWeights::init(std::size_t in_channels, std::size_t qk_channels, Rng& rng) {
  require(in_channels >= 1 && qk_channels >= 1, "crossgate needs at least one channel");
  const double s = 1.0 / std::sqrt(static_cast<double>(in_channels));
  GateWeights w;
  w.q_weight = rng.normal_tensor({qk_channels, in_channels, 1, 1}, s);
  w.q_bias = Tensor({qk_channels});
  w.k_weight = rng.normal_tensor({qk_channels, in_channels, 1, 1}, s);
  w.k_bias = Tensor({qk_channels});
  w.offset_weight = rng.normal_tensor({2, qk_channels, 3, 3}, 0.01 / std::sqrt(9.0 * static_cast<double>(qk_channels)));
  w.offset_bias = Tensor({2});
  return w;
}

GateWeightVars bind(ad::Tape& tape, const GateWeights& w, bool requires_grad) {
  return GateWeightVars{tape.leaf(w.q_weight, requires_grad),      tape.leaf(w.q_bias, requires_grad),
                        tape.leaf(w.k_weight, requires_grad),      tape.leaf(w.k_bias, requires_grad),
                        tape.leaf(w.offset_weight, requires_grad), tape.leaf(w.offset_bias, requires_grad)};
}

double default_max_disp(std::size_t width) { return static_cast<double>(width) / 4.0; }

QueryKey project_qk(const Tensor& features, const GateWeights& w) {
  return {kernels::conv2d(features, w.q_weight, w.q_bias, {}), kernels::conv2d(features, w.k_weight, w.k_bias, {})};
}

Tensor predict_offsets(const Tensor& q, const GateWeights& w, double max_disp) {
  require(max_disp > 0.0, "predict_offsets: max_disp must be positive");
  Tensor beta = kernels::conv2d(q, w.offset_weight, w.offset_bias, {.stride = 1, .padding = 1});
  for (double& v : beta.data()) v = max_disp * std::tanh(v);
  return beta;
}

Warped deform_sample(const Tensor& k, const Tensor& mask, const Tensor& offsets) {
  require(all_finite(offsets), "deform_sample: offsets must be finite");
  const std::size_t h = k.dim(1), w = k.dim(2);
  require_mask_shape(mask, h, w, "deform_sample");
  require(offsets.shape() == Shape{2, h, w}, "deform_sample: offsets must be 2 x H x W");
  Tensor grid = kernels::identity_grid(h, w);
  grid += offsets;
  Tensor m_hat = threshold_half(kernels::bilinear_sample_2d(mask.reshaped({1, h, w}), grid));
  return {kernels::bilinear_sample_2d(k, grid), m_hat.reshaped({h, w})};
}

Tensor rowwise_similarity(const Tensor& q, const Tensor& k_hat) {
  require(q.rank() == 3 && q.shape() == k_hat.shape(), "rowwise_similarity: Q and K_hat must share a C x H x W shape");
  const std::size_t c = q.dim(0), h = q.dim(1), w = q.dim(2);
  Tensor delta({w, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t r = 0; r < w; ++r) {
        const double kv = k_hat.at(ch, i, r);
        for (std::size_t j = 0; j < w; ++j) delta.at(r, i, j) += q.at(ch, i, j) * kv;
      }
  return delta;
}

Tensor cross_region_gate(const Tensor& similarity, const Tensor& mask, const Tensor& m_hat) {
  require(similarity.rank() == 3, "cross_region_gate: similarity must be W x H x W");
  const std::size_t w = similarity.dim(0), h = similarity.dim(1);
  require(similarity.dim(2) == w, "cross_region_gate: similarity must be W x H x W");
  require_mask_shape(mask, h, w, "cross_region_gate");
  require_mask_shape(m_hat, h, w, "cross_region_gate");
  require_binary(mask, "cross_region_gate");
  require_binary(m_hat, "cross_region_gate");
  Tensor out = similarity;
  for (std::size_t r = 0; r < w; ++r)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        if (mask.at(i, j) == m_hat.at(i, r)) out.at(r, i, j) = 0.0;
  return out;
}

Tensor aggregate_relevance(const Tensor& gated) {
  require(gated.rank() == 3, "aggregate_relevance: expected a W x H x W tensor");
  const std::size_t w = gated.dim(0), h = gated.dim(1);
  Tensor out({h, gated.dim(2)});
  for (std::size_t r = 0; r < w; ++r)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < out.dim(1); ++j) out.at(i, j) += gated.at(r, i, j);
  out *= 1.0 / static_cast<double>(w);
  return out;
}

Tensor nonshadow_modulation(const Tensor& relevance, const Tensor& mask) {
  require(relevance.shape() == mask.shape(), "nonshadow_modulation: shape mismatch");
  require_binary(mask, "nonshadow_modulation");
  Tensor out = relevance;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= 1.0 - mask[i];
  return out;
}

ad::Var gate_response(ad::Tape& tape, ad::Var q, ad::Var k_hat, const Tensor& mask, const Tensor& m_hat,
                      bool normalize_by_count) {
  const Tensor& qv = tape.value(q);
  const Tensor& kv = tape.value(k_hat);
  require(qv.rank() == 3 && qv.shape() == kv.shape(), "gate_response: Q and K_hat must share a C x H x W shape");
  const std::size_t c = qv.dim(0), h = qv.dim(1), w = qv.dim(2);
  require_mask_shape(mask, h, w, "gate_response");
  require_mask_shape(m_hat, h, w, "gate_response");
  require_binary(mask, "gate_response");
  require_binary(m_hat, "gate_response");

  // Only non-shadow queries survive, and for those the XOR selects shadow keys.
  // Summing the selected keys first turns the row similarity into one dot product.
  const Tensor scale = response_scale(mask, m_hat, normalize_by_count);
  Tensor key_sum({c, h});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t r = 0; r < w; ++r)
        if (m_hat.at(i, r) != 0.0) key_sum.at(ch, i) += kv.at(ch, i, r);

  Tensor out({h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      if (scale.at(i, j) == 0.0) continue;
      double acc = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) acc += qv.at(ch, i, j) * key_sum.at(ch, i);
      out.at(i, j) = scale.at(i, j) * acc;
    }

  return tape.record(std::move(out), {q, k_hat}, [scale, key_sum, m_hat](const ad::BackwardArgs& b) {
    const Tensor& qv = *b.in[0];
    const std::size_t c = qv.dim(0), h = qv.dim(1), w = qv.dim(2);
    if (Tensor* gq = b.grad_in[0]) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j)
            gq->at(ch, i, j) += b.grad_out.at(i, j) * scale.at(i, j) * key_sum.at(ch, i);
    }
    if (Tensor* gk = b.grad_in[1]) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i) {
          double row = 0.0;
          for (std::size_t j = 0; j < w; ++j) row += b.grad_out.at(i, j) * scale.at(i, j) * qv.at(ch, i, j);
          for (std::size_t r = 0; r < w; ++r)
            if (m_hat.at(i, r) != 0.0) gk->at(ch, i, r) += row;
        }
    }
  });
}

ad::Var horizontal_gate(ad::Tape& tape, ad::Var features, const Tensor& mask, const GateWeightVars& w,
                        const GateOptions& options) {
  const Tensor& f = tape.value(features);
  require(f.rank() == 3, "crossgate: features must be C x H x W");
  const std::size_t h = f.dim(1), wd = f.dim(2);
  require_mask_shape(mask, h, wd, "crossgate");
  require_binary(mask, "crossgate");

  ad::Var q = ad::conv2d(tape, features, w.q_weight, w.q_bias, {});
  ad::Var k = ad::conv2d(tape, features, w.k_weight, w.k_bias, {});
  if (!options.use_offsets) return gate_response(tape, q, k, mask, mask, options.normalize_by_count);

  const double max_disp = options.max_disp_fraction * static_cast<double>(wd);
  require(max_disp > 0.0, "crossgate: max_disp must be positive");
  ad::Var raw = ad::conv2d(tape, q, w.offset_weight, w.offset_bias, {.stride = 1, .padding = 1});
  ad::Var beta = ad::scale(tape, ad::tanh(tape, raw), max_disp);
  ad::Var grid = ad::add_const(tape, beta, kernels::identity_grid(h, wd));
  ad::Var k_hat = ad::bilinear_sample_2d(tape, k, grid);
  const Tensor m_hat =
      threshold_half(kernels::bilinear_sample_2d(mask.reshaped({1, h, wd}), tape.value(grid))).reshaped({h, wd});
  return gate_response(tape, q, k_hat, mask, m_hat, options.normalize_by_count);
}

GateMapVars crossgate_maps(ad::Tape& tape, ad::Var features, const Tensor& mask, const GateWeightVars& horizontal,
                           const GateWeightVars& vertical, const GateOptions& options) {
  ad::Var gh = horizontal_gate(tape, features, mask, horizontal, options);
  ad::Var ft = ad::transpose_hw(tape, features);
  ad::Var gv = ad::transpose_hw(tape, horizontal_gate(tape, ft, transpose_last2(mask), vertical, options));
  return {gh, gv};
}

Tensor horizontal_gate(const Tensor& features, const Tensor& mask, const GateWeights& w, const GateOptions& options) {
  ad::Tape tape;
  return tape.value(horizontal_gate(tape, tape.constant(features), mask, bind(tape, w, false), options));
}

GateMaps crossgate_maps(const Tensor& features, const Tensor& mask, const GateWeights& horizontal,
                        const GateWeights& vertical, const GateOptions& options) {
  ad::Tape tape;
  const auto maps = crossgate_maps(tape, tape.constant(features), mask, bind(tape, horizontal, false),
                                   bind(tape, vertical, false), options);
  return {tape.value(maps.horizontal), tape.value(maps.vertical)};
}

Tensor to_display(const Tensor& map) {
  Tensor out = map;
  if (map.size() == 0) return out;
  const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
  const double span = *hi - *lo;
  for (double& v : out.data()) v = span > 0.0 ? 255.0 * (v - *lo) / span : 0.0;
  return out;
}

}  // namespace deshadow::crossgate
