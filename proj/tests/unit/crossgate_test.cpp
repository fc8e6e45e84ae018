#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "deshadow/crossgate/crossgate.hpp"
#include "deshadow/errors.hpp"
#include "deshadow/numerics/gradcheck.hpp"
#include "deshadow/numerics/ops.hpp"
#include "reference.hpp"

namespace deshadow::crossgate {
namespace {

using ad::Tape;
using ad::Var;
using namespace deshadow::reference;

Tensor random_mask(std::size_t h, std::size_t w, Rng& rng, double p = 0.4) {
  Tensor m({h, w});
  for (double& v : m.data()) v = rng.uniform() < p ? 1.0 : 0.0;
  return m;
}

GateWeights random_weights(std::size_t c, std::size_t cq, Rng& rng, double offset_scale = 0.3) {
  GateWeights w = GateWeights::init(c, cq, rng);
  w.q_bias = rng.normal_tensor({cq}, 0.2);
  w.k_bias = rng.normal_tensor({cq}, 0.2);
  w.offset_weight = rng.normal_tensor({2, cq, 3, 3}, offset_scale);
  w.offset_bias = rng.normal_tensor({2}, 0.3);
  return w;
}

bool all_equal(const Tensor& t, double v) {
  return std::all_of(t.data().begin(), t.data().end(), [v](double x) { return x == v; });
}

// Straight-loop reference of the horizontal pipeline, sharing no code with the library.
TEST(ProjectQk, IdentityAndZeroWeights) {
  Rng rng(1);
  const Tensor f = rng.normal_tensor({3, 4, 5}, 1.0);
  GateWeights w = GateWeights::init(3, 3, rng);
  w.q_weight = Tensor({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w.q_weight.at(c, c, 0, 0) = 1.0;
  w.k_weight = w.q_weight;
  auto qk = project_qk(f, w);
  EXPECT_EQ(qk.q, f);
  EXPECT_EQ(qk.k, f);
  w.q_weight = Tensor({3, 3, 1, 1});
  w.k_weight = Tensor({3, 3, 1, 1});
  qk = project_qk(f, w);
  EXPECT_TRUE(all_equal(qk.q, 0.0));
  EXPECT_TRUE(all_equal(qk.k, 0.0));
}

TEST(ProjectQk, MatchesPerPixelMatrixMultiply) {
  Rng rng(2);
  const Tensor f = rng.normal_tensor({3, 4, 5}, 1.0);
  const GateWeights w = random_weights(3, 2, rng);
  const auto qk = project_qk(f, w);
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double q = w.q_bias[o], k = w.k_bias[o];
        for (std::size_t c = 0; c < 3; ++c) {
          q += w.q_weight.at(o, c, 0, 0) * f.at(c, i, j);
          k += w.k_weight.at(o, c, 0, 0) * f.at(c, i, j);
        }
        EXPECT_NEAR(qk.q.at(o, i, j), q, 1e-14);
        EXPECT_NEAR(qk.k.at(o, i, j), k, 1e-14);
      }
}

TEST(PredictOffsets, ZeroWeightsAndBound) {
  Rng rng(3);
  const Tensor q = rng.normal_tensor({2, 5, 6}, 1.0);
  GateWeights w = GateWeights::init(2, 2, rng);
  w.offset_weight = Tensor({2, 2, 3, 3});
  EXPECT_TRUE(all_equal(predict_offsets(q, w, 1.5), 0.0));
  w.offset_weight = rng.normal_tensor({2, 2, 3, 3}, 50.0);
  const Tensor beta = predict_offsets(q, w, 1.5);
  EXPECT_EQ(beta.shape(), (Shape{2, 5, 6}));
  for (double v : beta.data()) EXPECT_LE(std::abs(v), 1.5);
  EXPECT_THROW(predict_offsets(q, w, 0.0), ContractViolation);
  EXPECT_DOUBLE_EQ(default_max_disp(16), 4.0);
}

TEST(DeformSample, IdentityConstantAndShift) {
  Rng rng(4);
  const Tensor k = rng.normal_tensor({2, 4, 5}, 1.0);
  const Tensor m = random_mask(4, 5, rng);
  auto warped = deform_sample(k, m, Tensor({2, 4, 5}));
  EXPECT_EQ(warped.k_hat, k);
  EXPECT_EQ(warped.m_hat, m);

  const Tensor constant({2, 4, 5}, 0.7);
  const Tensor wild = rng.normal_tensor({2, 4, 5}, 3.0);
  EXPECT_LT(max_abs_diff(deform_sample(constant, m, wild).k_hat, constant), 1e-15);

  Tensor shift({2, 4, 5});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) shift.at(0, i, j) = 1.0;
  warped = deform_sample(k, m, shift);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j + 1 < 5; ++j) {
        EXPECT_EQ(warped.k_hat.at(c, i, j), k.at(c, i, j + 1));
        EXPECT_EQ(warped.m_hat.at(i, j), m.at(i, j + 1));
      }
}

TEST(DeformSample, MatchesSamplingOracle) {
  Rng rng(5);
  const Tensor f = rng.normal_tensor({3, 5, 6}, 1.0);
  const GateWeights w = random_weights(3, 2, rng);
  const auto qk = project_qk(f, w);
  const Tensor beta = predict_offsets(qk.q, w, default_max_disp(6));
  const Tensor m = random_mask(5, 6, rng);
  const auto warped = deform_sample(qk.k, m, beta);
  const Tensor mm = m.reshaped({1, 5, 6});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      const double x = static_cast<double>(j) + beta.at(0, i, j), y = static_cast<double>(i) + beta.at(1, i, j);
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(warped.k_hat.at(c, i, j), ref_sample(qk.k, c, x, y), 1e-14);
      EXPECT_EQ(warped.m_hat.at(i, j), ref_sample(mm, 0, x, y) >= 0.5 ? 1.0 : 0.0);
    }
}

TEST(RowwiseSimilarity, HandExample) {
  const Tensor q({1, 1, 2}, std::vector<double>{1, 2});
  const Tensor k({1, 1, 2}, std::vector<double>{3, 4});
  const Tensor d = rowwise_similarity(q, k);
  EXPECT_EQ(d.shape(), (Shape{2, 1, 2}));
  EXPECT_EQ(d.at(0, 0, 0), 3.0);
  EXPECT_EQ(d.at(1, 0, 0), 4.0);
  EXPECT_EQ(d.at(0, 0, 1), 6.0);
  EXPECT_EQ(d.at(1, 0, 1), 8.0);
  EXPECT_TRUE(all_equal(rowwise_similarity(Tensor({1, 1, 2}), k), 0.0));
}

TEST(RowwiseSimilarity, MatchesAllPairsRestrictedToRows) {
  Rng rng(6);
  const std::size_t c = 3, h = 4, w = 5;
  const Tensor q = rng.normal_tensor({c, h, w}, 1.0);
  const Tensor k = rng.normal_tensor({c, h, w}, 1.0);
  const Tensor d = rowwise_similarity(q, k);
  // Full (HW) x (HW) similarity, then keep pairs whose rows coincide.
  for (std::size_t a = 0; a < h * w; ++a)
    for (std::size_t b = 0; b < h * w; ++b) {
      if (a / w != b / w) continue;
      double s = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) s += q.at(ch, a / w, a % w) * k.at(ch, b / w, b % w);
      EXPECT_NEAR(d.at(b % w, a / w, a % w), s, 1e-13);
    }
}

TEST(CrossRegionGate, KeepsExactlyDifferingPairs) {
  Rng rng(7);
  const std::size_t h = 5, w = 6;
  const Tensor d = rng.normal_tensor({w, h, w}, 1.0);
  const Tensor zeros({h, w});
  EXPECT_TRUE(all_equal(cross_region_gate(d, zeros, zeros), 0.0));
  const Tensor m = random_mask(h, w, rng), mh = random_mask(h, w, rng);
  const Tensor g = cross_region_gate(d, m, mh);
  for (std::size_t r = 0; r < w; ++r)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        EXPECT_EQ(g.at(r, i, j), m.at(i, j) != mh.at(i, r) ? d.at(r, i, j) : 0.0);
  Tensor bad = m;
  bad.at(0, 0) = 0.5;
  EXPECT_THROW(cross_region_gate(d, bad, mh), ContractViolation);
  EXPECT_THROW(cross_region_gate(d, m, bad), ContractViolation);
}

TEST(AggregateRelevance, MeanOverKeys) {
  const Tensor d({2, 1, 1}, std::vector<double>{2, 4});
  EXPECT_EQ(aggregate_relevance(d).item(), 3.0);
  EXPECT_TRUE(all_equal(aggregate_relevance(Tensor({4, 3, 4}, -1.25)), -1.25));
  EXPECT_TRUE(all_equal(aggregate_relevance(Tensor({4, 3, 4})), 0.0));
}

TEST(NonshadowModulation, RetainsOffShadowOnly) {
  Rng rng(8);
  const Tensor rel = rng.normal_tensor({4, 4}, 1.0);
  EXPECT_TRUE(all_equal(nonshadow_modulation(rel, Tensor({4, 4}, 1.0)), 0.0));
  EXPECT_EQ(nonshadow_modulation(rel, Tensor({4, 4})), rel);
  const Tensor m = random_mask(4, 4, rng);
  const Tensor g = nonshadow_modulation(rel, m);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(g[i], m[i] == 1.0 ? 0.0 : rel[i]);
}

TEST(CrossgateMaps, ComponentCompositionMatchesPipeline) {
  Rng rng(9);
  const Tensor f = rng.normal_tensor({3, 6, 7}, 1.0);
  const Tensor m = random_mask(6, 7, rng);
  const GateWeights w = random_weights(3, 2, rng);
  const auto qk = project_qk(f, w);
  const auto warped = deform_sample(qk.k, m, predict_offsets(qk.q, w, default_max_disp(7)));
  const Tensor composed = nonshadow_modulation(
      aggregate_relevance(cross_region_gate(rowwise_similarity(qk.q, warped.k_hat), m, warped.m_hat)), m);
  EXPECT_LT(max_abs_diff(composed, horizontal_gate(f, m, w)), 1e-12);
}

TEST(CrossgateMaps, VerticalIsTransposedHorizontal) {
  Rng rng(10);
  const Tensor f = rng.normal_tensor({3, 5, 8}, 1.0);
  const Tensor m = random_mask(5, 8, rng);
  const GateWeights wh = random_weights(3, 3, rng), wv = random_weights(3, 3, rng);
  const GateMaps maps = crossgate_maps(f, m, wh, wv);
  EXPECT_EQ(maps.horizontal, horizontal_gate(f, m, wh));
  EXPECT_EQ(maps.vertical, ref_transpose(horizontal_gate(ref_transpose(f), ref_transpose(m), wv)));
}

TEST(CrossgateMaps, DegenerateMasksGiveZeroMaps) {
  Rng rng(11);
  const Tensor f = rng.normal_tensor({2, 6, 6}, 1.0);
  const GateWeights wh = random_weights(2, 2, rng), wv = random_weights(2, 2, rng);
  for (double fill : {0.0, 1.0}) {
    const GateMaps maps = crossgate_maps(f, Tensor({6, 6}, fill), wh, wv);
    EXPECT_TRUE(all_equal(maps.horizontal, 0.0));
    EXPECT_TRUE(all_equal(maps.vertical, 0.0));
  }
}

TEST(CrossgateMaps, MatchesLoopOracle) {
  Rng rng(12);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t h = 1 + rng.below(16), w = 1 + rng.below(16), c = 1 + rng.below(4), cq = 1 + rng.below(3);
    const Tensor f = rng.normal_tensor({c, h, w}, 1.0);
    const Tensor m = random_mask(h, w, rng, rng.uniform(0.1, 0.7));
    const GateWeights wh = random_weights(c, cq, rng), wv = random_weights(c, cq, rng);
    for (bool offsets : {true, false})
      for (bool by_count : {false, true}) {
        const GateOptions opt{.use_offsets = offsets, .normalize_by_count = by_count};
        const GateMaps maps = crossgate_maps(f, m, wh, wv, opt);
        EXPECT_LT(max_abs_diff(maps.horizontal, ref_horizontal(f, m, wh, offsets, by_count)), 1e-10);
        const Tensor vert = ref_transpose(ref_horizontal(ref_transpose(f), ref_transpose(m), wv, offsets, by_count));
        EXPECT_LT(max_abs_diff(maps.vertical, vert), 1e-10) << h << "x" << w;
      }
  }
}

TEST(CrossgateMaps, ZeroOnShadowPixels) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 2 + rng.below(10), w = 2 + rng.below(10);
    const Tensor f = rng.normal_tensor({2, h, w}, 1.0);
    const Tensor m = random_mask(h, w, rng, rng.uniform());
    const GateMaps maps = crossgate_maps(f, m, random_weights(2, 2, rng), random_weights(2, 2, rng));
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i] == 1.0) {
        EXPECT_EQ(maps.horizontal[i], 0.0);
        EXPECT_EQ(maps.vertical[i], 0.0);
      }
  }
}

TEST(CrossgateMaps, ZeroOffsetWeightsEqualFixedSampling) {
  Rng rng(14);
  const Tensor f = rng.normal_tensor({3, 7, 9}, 1.0);
  const Tensor m = random_mask(7, 9, rng);
  GateWeights wh = random_weights(3, 3, rng), wv = random_weights(3, 3, rng);
  for (GateWeights* w : {&wh, &wv}) {
    w->offset_weight = Tensor({2, 3, 3, 3});
    w->offset_bias = Tensor({2});
  }
  const GateMaps learned = crossgate_maps(f, m, wh, wv);
  const GateMaps fixed = crossgate_maps(f, m, wh, wv, {.use_offsets = false});
  EXPECT_EQ(learned.horizontal, fixed.horizontal);
  EXPECT_EQ(learned.vertical, fixed.vertical);
}

TEST(CrossgateMaps, NonBinaryMaskIsRejected) {
  Rng rng(15);
  const Tensor f = rng.normal_tensor({2, 3, 3}, 1.0);
  Tensor m({3, 3});
  m.at(1, 1) = 0.3;
  const GateWeights w = random_weights(2, 2, rng);
  EXPECT_THROW(crossgate_maps(f, m, w, w), ContractViolation);
  EXPECT_THROW(crossgate_maps(f, Tensor({3, 4}), w, w), ContractViolation);
}

struct Packed {
  std::vector<double> flat;
  std::vector<std::pair<std::size_t, Shape>> fields;
  void add(const Tensor& t) {
    fields.emplace_back(flat.size(), t.shape());
    flat.insert(flat.end(), t.values().begin(), t.values().end());
  }
  Var get(Tape& tape, Var p, std::size_t k) const { return ad::slice(tape, p, fields[k].first, fields[k].second); }
};

TEST(CrossgateMaps, GradientsMatchFiniteDifferences) {
  Rng rng(16);
  const std::size_t c = 2, h = 4, w = 4;
  const Tensor m({h, w}, std::vector<double>{0, 0, 1, 1, 0, 1, 1, 0, 0, 1, 0, 0, 1, 1, 0, 0});
  const GateWeights wh = random_weights(c, 2, rng, 0.4), wv = random_weights(c, 2, rng, 0.4);
  Packed pk;
  pk.add(rng.normal_tensor({c, h, w}, 1.0));
  for (const GateWeights* g : {&wh, &wv})
    for (const Tensor* t : {&g->q_weight, &g->q_bias, &g->k_weight, &g->k_bias, &g->offset_weight, &g->offset_bias})
      pk.add(*t);
  const Tensor probe_h = rng.normal_tensor({h, w}, 1.0), probe_v = rng.normal_tensor({h, w}, 1.0);
  const TapeFn fn = [&](Tape& tape, Var flat) {
    auto vars = [&](std::size_t base) {
      return GateWeightVars{pk.get(tape, flat, base),     pk.get(tape, flat, base + 1), pk.get(tape, flat, base + 2),
                            pk.get(tape, flat, base + 3), pk.get(tape, flat, base + 4), pk.get(tape, flat, base + 5)};
    };
    const auto maps = crossgate_maps(tape, pk.get(tape, flat, 0), m, vars(1), vars(7));
    return ad::add(tape, ad::sum(tape, ad::mul_const(tape, maps.horizontal, probe_h)),
                   ad::sum(tape, ad::mul_const(tape, maps.vertical, probe_v)));
  };
  const auto r = finite_diff_check(fn, pk.flat, {.h = 1e-6, .skip_kinks = true});
  EXPECT_LT(r.max_rel_error, 1e-4) << "worst " << r.worst_index;
  EXPECT_LT(r.skipped_kinks, r.checked / 10);
  // The offset predictor must actually receive gradient.
  const auto grad = gradient(fn, pk.flat);
  double offset_norm = 0.0;
  for (std::size_t i = 0; i < shape_size(pk.fields[5].second); ++i)
    offset_norm += std::abs(grad[pk.fields[5].first + i]);
  EXPECT_GT(offset_norm, 1e-6);
}

TEST(ToDisplay, NormalizesPerMap) {
  const Tensor m({2, 2}, std::vector<double>{-1, 0, 1, 3});
  const Tensor d = to_display(m);
  EXPECT_EQ(d[0], 0.0);
  EXPECT_EQ(d[3], 255.0);
  EXPECT_DOUBLE_EQ(d[2], 127.5);
  EXPECT_TRUE(all_equal(to_display(Tensor({2, 2}, 4.0)), 0.0));
}

}  // namespace
}  // namespace deshadow::crossgate
