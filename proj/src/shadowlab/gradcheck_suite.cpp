#include "deshadow/shadowlab/gradcheck_suite.hpp"

#include <algorithm>
#include <utility>

#include "deshadow/colorshift/colorshift.hpp"
#include "deshadow/crossgate/crossgate.hpp"
#include "deshadow/model/losses.hpp"
#include "deshadow/model/network.hpp"
#include "deshadow/model/train.hpp"
#include "deshadow/numerics/gradcheck.hpp"
#include "deshadow/numerics/ops.hpp"
#include "deshadow/numerics/random.hpp"
#include "deshadow/ssm/ssm.hpp"

namespace deshadow::shadowlab {
namespace {

using ad::Tape;
using ad::Var;

// Several tensors flattened into one leaf so a single check covers all of them.
struct Packed {
  std::vector<double> flat;
  std::vector<std::pair<std::size_t, Shape>> fields;

  std::size_t add(const Tensor& t) {
    fields.emplace_back(flat.size(), t.shape());
    flat.insert(flat.end(), t.values().begin(), t.values().end());
    return fields.size() - 1;
  }
  Var get(Tape& tape, Var p, std::size_t k) const { return ad::slice(tape, p, fields[k].first, fields[k].second); }
};

GradCheckEntry entry(std::string name, const GradCheckResult& r, double tol) {
  return {std::move(name), r.max_rel_error, tol, r.checked, r.skipped_kinks, r.passed(tol)};
}

GradCheckEntry check_softplus(Rng& rng) {
  Tensor x = rng.normal_tensor({3, 4, 4}, 3.0);
  const Tensor w = rng.normal_tensor({3, 4, 4}, 1.0);
  const TapeFn f = [&](Tape& t, Var p) {
    return ad::sum(t, ad::mul_const(t, ad::softplus(t, ad::reshape(t, p, x.shape())), w));
  };
  return entry("softplus", finite_diff_check(f, x.values()), kUnitTolerance);
}

GradCheckEntry check_conv2d(Rng& rng) {
  Packed pk;
  pk.add(rng.normal_tensor({2, 6, 5}, 1.0));
  pk.add(rng.normal_tensor({3, 2, 3, 3}, 0.5));
  pk.add(rng.normal_tensor({3}, 0.5));
  const Tensor w1 = rng.normal_tensor({3, 6, 5}, 1.0), w2 = rng.normal_tensor({3, 3, 3}, 1.0);
  const TapeFn f = [&](Tape& t, Var p) {
    const Var x = pk.get(t, p, 0), k = pk.get(t, p, 1), b = pk.get(t, p, 2);
    const Var same = ad::conv2d(t, x, k, b, {.stride = 1, .padding = 1});
    const Var strided = ad::conv2d(t, x, k, b, {.stride = 2, .padding = 1});
    return ad::add(t, ad::sum(t, ad::mul_const(t, same, w1)), ad::sum(t, ad::mul_const(t, strided, w2)));
  };
  return entry("conv2d", finite_diff_check(f, pk.flat), kUnitTolerance);
}

GradCheckEntry check_layer_norm(Rng& rng) {
  Packed pk;
  pk.add(rng.normal_tensor({4, 3, 3}, 1.0));
  pk.add(rng.normal_tensor({4}, 1.0));
  pk.add(rng.normal_tensor({4}, 1.0));
  const Tensor w = rng.normal_tensor({4, 3, 3}, 1.0);
  const TapeFn f = [&](Tape& t, Var p) {
    return ad::sum(t, ad::mul_const(t, ad::layer_norm(t, pk.get(t, p, 0), pk.get(t, p, 1), pk.get(t, p, 2)), w));
  };
  return entry("layer_norm", finite_diff_check(f, pk.flat), kUnitTolerance);
}

GradCheckEntry check_bilinear(Rng& rng) {
  const std::size_t h = 5, w = 6;
  Packed pk;
  pk.add(rng.normal_tensor({2, h, w}, 1.0));
  Tensor grid({2, 4, 4});
  for (std::size_t p = 0; p < 16; ++p) {
    grid[p] = rng.uniform(0.1, w - 1.1);
    grid[16 + p] = rng.uniform(0.1, h - 1.1);
  }
  pk.add(grid);
  const Tensor probe_w = rng.normal_tensor({2, 4, 4}, 1.0);
  const TapeFn f = [&](Tape& t, Var p) {
    return ad::sum(t, ad::mul_const(t, ad::bilinear_sample_2d(t, pk.get(t, p, 0), pk.get(t, p, 1)), probe_w));
  };
  return entry("bilinear_sample_2d", finite_diff_check(f, pk.flat, {.skip_kinks = true}), kUnitTolerance);
}

GradCheckEntry check_scan(Rng& rng) {
  const std::size_t len = 12, c = 3, z = 4;
  ssm::ContinuousParams sp = ssm::ContinuousParams::init(c, z, rng);
  for (std::size_t e = 0; e < c; ++e) sp.delta_bias[e] = rng.uniform(-2.0, 1.0);
  sp.gate_proj = rng.normal_tensor({c, 1}, 0.7);
  for (std::size_t k = 0; k < z; ++k) sp.a_log[k] = rng.uniform(-1.5, 1.5);
  Packed pk;
  for (const Tensor* t : {&sp.a_log, &sp.b_proj, &sp.c_proj, &sp.delta_proj, &sp.delta_bias, &sp.gate_proj,
                          &sp.feedthrough})
    pk.add(*t);
  pk.add(rng.normal_tensor({len, c}, 1.0));
  pk.add(rng.normal_tensor({len, 1}, 1.0));
  const Tensor w = rng.normal_tensor({len, c}, 1.0);
  const TapeFn f = [&](Tape& t, Var p) {
    const ssm::ParamVars v{pk.get(t, p, 0), pk.get(t, p, 1), pk.get(t, p, 2), pk.get(t, p, 3),
                           pk.get(t, p, 4), pk.get(t, p, 5), pk.get(t, p, 6)};
    return ad::sum(t, ad::mul_const(t, ssm::selective_scan(t, pk.get(t, p, 7), v, pk.get(t, p, 8)), w));
  };
  return entry("selective_scan", finite_diff_check(f, pk.flat), kUnitTolerance);
}

GradCheckEntry check_crossgate(Rng& rng) {
  const std::size_t c = 2, h = 6, w = 6;
  Tensor mask({h, w});
  for (std::size_t i = 1; i < 5; ++i)
    for (std::size_t j = 2; j < 5; ++j) mask.at(i, j) = 1.0;
  auto weights = [&] {
    auto g = crossgate::GateWeights::init(c, c, rng);
    g.q_bias = rng.normal_tensor({c}, 0.2);
    g.k_bias = rng.normal_tensor({c}, 0.2);
    g.offset_weight = rng.normal_tensor({2, c, 3, 3}, 0.3);
    g.offset_bias = rng.normal_tensor({2}, 0.3);
    return g;
  };
  const auto wh = weights(), wv = weights();
  Packed pk;
  pk.add(rng.normal_tensor({c, h, w}, 1.0));
  for (const auto* g : {&wh, &wv})
    for (const Tensor* t : {&g->q_weight, &g->q_bias, &g->k_weight, &g->k_bias, &g->offset_weight, &g->offset_bias})
      pk.add(*t);
  const Tensor ph = rng.normal_tensor({h, w}, 1.0), pv = rng.normal_tensor({h, w}, 1.0);
  const TapeFn f = [&](Tape& t, Var p) {
    auto vars = [&](std::size_t b) {
      return crossgate::GateWeightVars{pk.get(t, p, b),     pk.get(t, p, b + 1), pk.get(t, p, b + 2),
                                       pk.get(t, p, b + 3), pk.get(t, p, b + 4), pk.get(t, p, b + 5)};
    };
    const auto maps = crossgate::crossgate_maps(t, pk.get(t, p, 0), mask, vars(1), vars(7));
    return ad::add(t, ad::sum(t, ad::mul_const(t, maps.horizontal, ph)),
                   ad::sum(t, ad::mul_const(t, maps.vertical, pv)));
  };
  return entry("crossgate", finite_diff_check(f, pk.flat, {.skip_kinks = true}), kUnitTolerance);
}

GradCheckEntry check_charbonnier(Rng& rng) {
  const Tensor pred = rng.uniform_tensor({3, 4, 4}, 0.0, 1.0), target = rng.uniform_tensor({3, 4, 4}, 0.0, 1.0);
  const TapeFn f = [&](Tape& t, Var p) {
    const Var x = ad::reshape(t, p, pred.shape());
    return ad::add(t, model::charbonnier(t, x, target, 1e-3, false), model::charbonnier(t, x, target, 1e-3, true));
  };
  return entry("charbonnier", finite_diff_check(f, pred.values()), kUnitTolerance);
}

GradCheckEntry check_colorshift_loss(Rng& rng) {
  const Tensor anchor = rng.normal_tensor({3, 3, 3}, 1.0), positive = rng.normal_tensor({3, 3, 3}, 1.0);
  const std::vector<Tensor> negatives{rng.normal_tensor({3, 3, 3}, 1.0), rng.normal_tensor({3, 3, 3}, 1.0),
                                      rng.normal_tensor({3, 3, 3}, 1.0)};
  const std::vector<double> weights{0.2, 0.3, 0.5};
  const TapeFn f = [&](Tape& t, Var p) {
    return colorshift::colorshift_loss(t, ad::reshape(t, p, anchor.shape()), positive, negatives, weights);
  };
  return entry("colorshift_loss", finite_diff_check(f, anchor.values(), {.skip_kinks = true}), kUnitTolerance);
}

// Sampled coordinates of the full two-stage loss: coarse and main parameters
// together, contrastive term switched on.
GradCheckEntry check_total_loss(Rng& rng) {
  model::ModelConfig c;
  c.channels = 4;
  c.state_dim = 2;
  c.lambda = 0.5;
  c.seed = rng.below(1u << 30);
  const std::size_t h = 8, w = 8;
  model::Sample s{rng.uniform_tensor({3, h, w}, 0.05, 0.5), Tensor({h, w}), {}};
  for (std::size_t i = 2; i < 6; ++i)
    for (std::size_t j = 1; j < 6; ++j) s.mask.at(i, j) = 1.0;
  s.target = s.input;
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t p = 0; p < h * w; ++p)
      if (s.mask[p] == 1.0) s.target[ch * h * w + p] = std::min(1.0, s.input[ch * h * w + p] * 1.8);

  const model::ParamStore base = model::init_params(c);
  const auto fx = model::make_extractor(c);
  const model::LossTarget lt = model::make_loss_target(s.target, s.mask, fx, c.clusters, c.seed);

  Tape tape;
  const model::Bound bound(tape, base, [](const std::string&) { return true; });
  const auto grads = tape.backward(
      model::total_loss(tape, model::forward(tape, bound, tape.constant(s.input), s.mask, c), lt, fx, c).total);

  std::vector<std::pair<std::size_t, std::size_t>> picks;
  const std::size_t want = std::max<std::size_t>(40, base.scalar_count() / 100);
  while (picks.size() < want) {
    const std::size_t p = rng.below(base.entries().size());
    const std::pair<std::size_t, std::size_t> pick{p, rng.below(base.entries()[p].value.size())};
    // Coordinates must be distinct or a later copy would undo the perturbation.
    if (std::find(picks.begin(), picks.end(), pick) == picks.end()) picks.push_back(pick);
  }
  std::vector<double> values, analytic;
  for (auto [p, i] : picks) {
    values.push_back(base.entries()[p].value[i]);
    analytic.push_back(grads[bound.vars()[p]][i]);
  }
  const ScalarFn f = [&](std::span<const double> v) {
    model::ParamStore moved = base;
    for (std::size_t k = 0; k < picks.size(); ++k) moved.entries()[picks[k].first].value[picks[k].second] = v[k];
    Tape t;
    const model::Bound mb(t, moved);
    return t.value(model::total_loss(t, model::forward(t, mb, t.constant(s.input), s.mask, c), lt, fx, c).total)
        .item();
  };
  return entry("total_loss", finite_diff_check(f, analytic, values, {.skip_kinks = true}), kEndToEndTolerance);
}

}  // namespace

std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckEntry> out;
  out.push_back(check_softplus(rng));
  out.push_back(check_conv2d(rng));
  out.push_back(check_layer_norm(rng));
  out.push_back(check_bilinear(rng));
  out.push_back(check_scan(rng));
  out.push_back(check_crossgate(rng));
  out.push_back(check_charbonnier(rng));
  out.push_back(check_colorshift_loss(rng));
  out.push_back(check_total_loss(rng));
  return out;
}

}  // namespace deshadow::shadowlab
