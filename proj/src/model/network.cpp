#include "deshadow/model/network.hpp"

#include <cmath>

#include "deshadow/errors.hpp"
#include "deshadow/numerics/ops.hpp"

namespace deshadow::model {
namespace {

constexpr const char* kScanFields[] = {"a_log",      "b_proj",    "c_proj",     "delta_proj",
                                       "delta_bias", "gate_proj", "feedthrough"};
constexpr const char* kGateFields[] = {"q_weight", "q_bias", "k_weight", "k_bias", "offset_weight", "offset_bias"};

std::string scan_prefix(const std::string& block, std::size_t direction, bool shared) {
  return shared ? block + ".scan." : block + ".scan" + std::to_string(direction) + ".";
}

Tensor conv_init(std::size_t out, std::size_t in, std::size_t k, double gain, Rng& rng) {
  return rng.normal_tensor({out, in, k, k}, gain / std::sqrt(static_cast<double>(in * k * k)));
}

void add_conv(ParamStore& s, const std::string& name, std::size_t out, std::size_t in, std::size_t k, double gain,
              Rng& rng) {
  s.add(name + ".weight", conv_init(out, in, k, gain, rng));
  s.add(name + ".bias", Tensor({out}));
}

ad::Var conv(ad::Tape& t, const Bound& p, const std::string& name, ad::Var x, kernels::Conv2dSpec spec = {}) {
  return ad::conv2d(t, x, p(name + ".weight"), p(name + ".bias"), spec);
}

void add_gate_params(ParamStore& s, const std::string& prefix, std::size_t channels, Rng& rng) {
  const auto w = crossgate::GateWeights::init(channels, channels, rng);
  const Tensor* fields[] = {&w.q_weight, &w.q_bias, &w.k_weight, &w.k_bias, &w.offset_weight, &w.offset_bias};
  for (std::size_t f = 0; f < 6; ++f) s.add(prefix + kGateFields[f], *fields[f]);
}

crossgate::GateWeightVars gate_vars(const Bound& p, const std::string& prefix) {
  return {p(prefix + "q_weight"), p(prefix + "q_bias"),        p(prefix + "k_weight"),
          p(prefix + "k_bias"),   p(prefix + "offset_weight"), p(prefix + "offset_bias")};
}

ad::Var mask_channel(ad::Tape& t, const Tensor& mask) { return t.constant(mask.reshaped({1, mask.dim(0), mask.dim(1)})); }

ad::Var pool_gate(ad::Tape& t, ad::Var g) {
  const Shape s = t.value(g).shape();
  ad::Var pooled = ad::avg_pool2(t, ad::reshape(t, g, {1, s[0], s[1]}));
  return ad::reshape(t, pooled, {s[0] / 2, s[1] / 2});
}

ssm::DirectionalGateVars pool_gates(ad::Tape& t, const ssm::DirectionalGateVars& g) {
  ssm::DirectionalGateVars out;
  if (g.horizontal) out.horizontal = pool_gate(t, *g.horizontal);
  if (g.vertical) out.vertical = pool_gate(t, *g.vertical);
  return out;
}

ad::Var run_blocks(ad::Tape& t, const Bound& p, const std::string& prefix, ad::Var x,
                   const ssm::DirectionalGateVars& gates, const ModelConfig& c) {
  for (std::size_t k = 0; k < c.blocks_per_level; ++k) x = scan_block(t, p, prefix + std::to_string(k), x, gates, c);
  return x;
}

}  // namespace

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  require(!index_.contains(name), "duplicate parameter name " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back({name, std::move(value)});
  return entries_.back().value;
}

std::size_t ParamStore::index(const std::string& name) const {
  const auto it = index_.find(name);
  require(it != index_.end(), "unknown parameter " + name);
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

Bound::Bound(ad::Tape& tape, const ParamStore& store, const Predicate& trainable) : store_(&store) {
  vars_.reserve(store.entries().size());
  for (const auto& e : store.entries()) vars_.push_back(tape.leaf(e.value, trainable && trainable(e.name)));
}

void add_block_params(ParamStore& s, const std::string& prefix, std::size_t channels, const ModelConfig& c, Rng& rng) {
  const std::size_t inner = channels * c.expand;
  s.add(prefix + ".norm.gain", Tensor({channels}, 1.0));
  s.add(prefix + ".norm.shift", Tensor({channels}));
  add_conv(s, prefix + ".expand", inner, channels, 1, 1.0, rng);
  s.add(prefix + ".dw.weight", rng.normal_tensor({inner, 3, 3}, 1.0 / 3.0));
  s.add(prefix + ".dw.bias", Tensor({inner}));
  const std::size_t paths = c.share_scan_params ? 1 : 4;
  for (std::size_t d = 0; d < paths; ++d) {
    const auto sp = ssm::ContinuousParams::init(inner, c.state_dim, rng);
    const Tensor* fields[] = {&sp.a_log, &sp.b_proj, &sp.c_proj, &sp.delta_proj, &sp.delta_bias, &sp.gate_proj,
                              &sp.feedthrough};
    for (std::size_t f = 0; f < 7; ++f) s.add(scan_prefix(prefix, d, c.share_scan_params) + kScanFields[f], *fields[f]);
  }
  // The four paths are summed, so the contraction starts at a quarter gain.
  add_conv(s, prefix + ".contract", channels, inner, 1, 0.25, rng);
}

ParamStore init_params(const ModelConfig& c) {
  c.validate();
  Rng rng(c.seed);
  ParamStore s;
  const std::size_t ch = c.channels;
  add_conv(s, "coarse.embed", ch, 4, 3, 1.0, rng);
  for (std::size_t k = 0; k < kCoarseBlocks; ++k) add_block_params(s, "coarse.block" + std::to_string(k), ch, c, rng);
  add_conv(s, "coarse.head", 3, ch, 1, 0.1, rng);

  add_gate_params(s, "main.gate_h.", ch, rng);
  add_gate_params(s, "main.gate_v.", ch, rng);
  add_conv(s, "main.embed", ch, 7, 3, 1.0, rng);
  for (std::size_t k = 0; k < c.blocks_per_level; ++k) add_block_params(s, "main.enc0." + std::to_string(k), ch, c, rng);
  add_conv(s, "main.down", 2 * ch, ch, 3, 1.0, rng);
  for (std::size_t k = 0; k < c.blocks_per_level; ++k)
    add_block_params(s, "main.enc1." + std::to_string(k), 2 * ch, c, rng);
  for (std::size_t k = 0; k < c.blocks_per_level; ++k)
    add_block_params(s, "main.dec1." + std::to_string(k), 2 * ch, c, rng);
  add_conv(s, "main.up", ch, 2 * ch, 1, 1.0, rng);
  for (std::size_t k = 0; k < c.blocks_per_level; ++k) add_block_params(s, "main.dec0." + std::to_string(k), ch, c, rng);
  add_conv(s, "main.head", 3, ch, 1, 0.1, rng);
  return s;
}

ad::Var scan_block(ad::Tape& t, const Bound& p, const std::string& prefix, ad::Var x,
                    const ssm::DirectionalGateVars& gates, const ModelConfig& c) {
  ad::Var h = ad::layer_norm(t, x, p(prefix + ".norm.gain"), p(prefix + ".norm.shift"));
  h = conv(t, p, prefix + ".expand", h);
  h = ad::silu(t, ad::depthwise_conv2d(t, h, p(prefix + ".dw.weight"), p(prefix + ".dw.bias")));
  std::array<ssm::ParamVars, 4> scans;
  for (std::size_t d = 0; d < 4; ++d) {
    const std::string sp = scan_prefix(prefix, d, c.share_scan_params);
    scans[d] = {p(sp + "a_log"),      p(sp + "b_proj"),    p(sp + "c_proj"),     p(sp + "delta_proj"),
                p(sp + "delta_bias"), p(sp + "gate_proj"), p(sp + "feedthrough")};
  }
  h = ssm::scan_image_4dir(t, h, scans, gates);
  return ad::add(t, x, conv(t, p, prefix + ".contract", h));
}

void require_model_input(const Tensor& input, const Tensor& mask) {
  require(input.rank() == 3 && input.dim(0) == 3, "model input must be 3 x H x W, got " + shape_string(input.shape()));
  const std::size_t h = input.dim(1), w = input.dim(2);
  require(h > 0 && w > 0 && h % 4 == 0 && w % 4 == 0,
          "model input height and width must be positive multiples of 4, got " + shape_string(input.shape()));
  require(mask.shape() == Shape{h, w}, "mask shape " + shape_string(mask.shape()) + " does not match the input");
  for (double v : mask.data()) require(v == 0.0 || v == 1.0, "mask must be binary");
}

CoarseOutput coarse_deshadow(ad::Tape& t, const Bound& p, ad::Var input, const Tensor& mask, const ModelConfig& c) {
  require_model_input(t.value(input), mask);
  ad::Var h = conv(t, p, "coarse.embed", ad::concat_channels(t, {input, mask_channel(t, mask)}), {.padding = 1});
  for (std::size_t k = 0; k < kCoarseBlocks; ++k) h = scan_block(t, p, "coarse.block" + std::to_string(k), h, {}, c);
  return {h, ad::add(t, conv(t, p, "coarse.head", h), input)};
}

ssm::DirectionalGateVars gate_maps(ad::Tape& t, const Bound& p, ad::Var features, const Tensor& mask,
                                   const ModelConfig& c) {
  crossgate::GateOptions opt{.use_offsets = c.gates != GateMode::kNoOffset,
                             .normalize_by_count = c.normalize_gate_by_count};
  ssm::DirectionalGateVars g;
  const bool h = c.gates != GateMode::kBaseline && c.gates != GateMode::kVertical;
  const bool v = c.gates != GateMode::kBaseline && c.gates != GateMode::kHorizontal;
  if (h) g.horizontal = crossgate::horizontal_gate(t, features, mask, gate_vars(p, "main.gate_h."), opt);
  if (v) {
    ad::Var ft = ad::transpose_hw(t, features);
    g.vertical = ad::transpose_hw(
        t, crossgate::horizontal_gate(t, ft, transpose_last2(mask), gate_vars(p, "main.gate_v."), opt));
  }
  return g;
}

ad::Var main_body(ad::Tape& t, const Bound& p, ad::Var input, const Tensor& mask, const CoarseOutput& coarse,
                  const ModelConfig& c) {
  require_model_input(t.value(input), mask);
  const ssm::DirectionalGateVars full = gate_maps(t, p, coarse.features, mask, c);
  const ssm::DirectionalGateVars half = pool_gates(t, full);

  ad::Var x = conv(t, p, "main.embed", ad::concat_channels(t, {input, coarse.prediction, mask_channel(t, mask)}),
                   {.padding = 1});
  ad::Var skip = run_blocks(t, p, "main.enc0.", x, full, c);
  ad::Var d = conv(t, p, "main.down", skip, {.stride = 2, .padding = 1});
  d = run_blocks(t, p, "main.enc1.", d, half, c);
  d = run_blocks(t, p, "main.dec1.", d, half, c);
  ad::Var u = ad::add(t, conv(t, p, "main.up", ad::upsample_nearest2(t, d)), skip);
  u = run_blocks(t, p, "main.dec0.", u, full, c);
  return ad::clamp(t, ad::add(t, conv(t, p, "main.head", u), input), 0.0, 1.0);
}

ad::Var forward(ad::Tape& t, const Bound& p, ad::Var input, const Tensor& mask, const ModelConfig& c) {
  return main_body(t, p, input, mask, coarse_deshadow(t, p, input, mask, c), c);
}

Tensor forward(const ParamStore& params, const Tensor& input, const Tensor& mask, const ModelConfig& c) {
  ad::Tape t;
  const Bound p(t, params);
  return t.value(forward(t, p, t.constant(input), mask, c));
}

crossgate::GateMaps inspect_gates(const ParamStore& params, const Tensor& input, const Tensor& mask,
                                  const ModelConfig& c) {
  ad::Tape t;
  const Bound p(t, params);
  const CoarseOutput coarse = coarse_deshadow(t, p, t.constant(input), mask, c);
  const auto g = gate_maps(t, p, coarse.features, mask, c);
  const Tensor zeros({mask.dim(0), mask.dim(1)});
  return {g.horizontal ? t.value(*g.horizontal) : zeros, g.vertical ? t.value(*g.vertical) : zeros};
}

}  // namespace deshadow::model
