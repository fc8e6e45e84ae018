#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "deshadow/errors.hpp"
#include "deshadow/numerics/archive.hpp"
#include "deshadow/numerics/gradcheck.hpp"
#include "deshadow/numerics/kernels.hpp"
#include "deshadow/numerics/ops.hpp"
#include "deshadow/numerics/random.hpp"

namespace deshadow {
namespace {

using ad::Tape;
using ad::Var;

TEST(Softplus, ReferenceValues) {
  EXPECT_DOUBLE_EQ(kernels::softplus(0.0), std::log(2.0));
  EXPECT_NEAR(kernels::softplus(100.0), 100.0, 1e-12);
  // log(1 + e) from a 30-digit evaluation.
  EXPECT_NEAR(kernels::softplus(1.0), 1.31326168751822283, 1e-15);
  EXPECT_GT(kernels::softplus(-700.0), 0.0);
}

TEST(Softplus, PositiveAndMonotone) {
  Rng rng(11);
  for (int k = 0; k < 2000; ++k) {
    const double a = rng.uniform(-60.0, 60.0);
    const double b = rng.uniform(-60.0, 60.0);
    EXPECT_GT(kernels::softplus(a), 0.0);
    if (a < b) {
      EXPECT_LE(kernels::softplus(a), kernels::softplus(b));
    }
  }
}

TEST(BilinearSample, IdentityGridIsExactForSmallShapes) {
  Rng rng(3);
  for (std::size_t c = 1; c <= 3; ++c)
    for (std::size_t h = 1; h <= 5; ++h)
      for (std::size_t w = 1; w <= 5; ++w) {
        Tensor src = rng.normal_tensor({c, h, w}, 3.0);
        EXPECT_EQ(kernels::bilinear_sample_2d(src, kernels::identity_grid(h, w)), src);
      }
}

TEST(BilinearSample, MidpointAndBorderClamp) {
  Tensor src({1, 1, 2}, std::vector<double>{2.0, 7.0});
  Tensor grid({2, 1, 1}, std::vector<double>{0.5, 0.0});
  EXPECT_DOUBLE_EQ(kernels::bilinear_sample_2d(src, grid)[0], 4.5);
  grid[0] = -3.0;
  EXPECT_DOUBLE_EQ(kernels::bilinear_sample_2d(src, grid)[0], 2.0);
  grid[0] = 9.0;
  grid[1] = -4.0;
  EXPECT_DOUBLE_EQ(kernels::bilinear_sample_2d(src, grid)[0], 7.0);
}

TEST(BilinearSample, RejectsMalformedGrid) {
  Tensor src({1, 2, 2});
  EXPECT_THROW(kernels::bilinear_sample_2d(src, Tensor({3, 2, 2})), ContractViolation);
  EXPECT_THROW(kernels::bilinear_sample_2d(src, Tensor({2, 4})), ContractViolation);
}

TEST(Conv2d, FixedCases) {
  Rng rng(5);
  Tensor x = rng.normal_tensor({1, 4, 5}, 1.0);
  Tensor w({1, 1, 1, 1}, 1.0);
  EXPECT_EQ(kernels::conv2d(x, w, Tensor({1}), {}), x);

  Tensor zero({2, 3, 3});
  Tensor w3 = rng.normal_tensor({4, 2, 3, 3}, 1.0);
  Tensor bias({4}, 0.75);
  Tensor out = kernels::conv2d(zero, w3, bias, {1, 1});
  for (double v : out.data()) EXPECT_EQ(v, 0.75);

  Tensor ones({1, 3, 3}, 1.0);
  Tensor k_ones({1, 1, 3, 3}, 1.0);
  Tensor r = kernels::conv2d(ones, k_ones, Tensor({1}), {1, 1});
  EXPECT_EQ(r.at(0, 1, 1), 9.0);
  EXPECT_EQ(r.at(0, 0, 0), 4.0);
}

TEST(Conv2d, MatchesDirectSummation) {
  Rng rng(8);
  for (std::size_t stride : {1u, 2u}) {
    Tensor x = rng.normal_tensor({3, 7, 6}, 1.0);
    Tensor w = rng.normal_tensor({2, 3, 3, 3}, 1.0);
    Tensor b = rng.normal_tensor({2}, 1.0);
    Tensor out = kernels::conv2d(x, w, b, {stride, 1});
    ASSERT_EQ(out.dim(1), (7 + 2 - 3) / stride + 1);
    ASSERT_EQ(out.dim(2), (6 + 2 - 3) / stride + 1);
    for (std::size_t o = 0; o < 2; ++o)
      for (std::size_t i = 0; i < out.dim(1); ++i)
        for (std::size_t j = 0; j < out.dim(2); ++j) {
          double s = b[o];
          for (std::size_t c = 0; c < 3; ++c)
            for (int di = 0; di < 3; ++di)
              for (int dj = 0; dj < 3; ++dj) {
                const long yi = static_cast<long>(i * stride) + di - 1;
                const long xj = static_cast<long>(j * stride) + dj - 1;
                if (yi < 0 || yi >= 7 || xj < 0 || xj >= 6) continue;
                s += w.at(o, c, di, dj) * x.at(c, yi, xj);
              }
          EXPECT_NEAR(out.at(o, i, j), s, 1e-12);
        }
  }
}

TEST(Conv2d, ChannelMismatchIsContractViolation) {
  EXPECT_THROW(kernels::conv2d(Tensor({2, 3, 3}), Tensor({1, 3, 1, 1}), Tensor({1}), {}), ContractViolation);
}

TEST(LayerNorm, FixedCases) {
  Tensor constant({4, 2, 2}, 3.0);
  Tensor gain({4}, 2.0), shift({4}, 0.5);
  const Tensor normalized = kernels::layer_norm(constant, gain, shift);
  for (double v : normalized.data()) EXPECT_DOUBLE_EQ(v, 0.5);

  Tensor pair({2, 1, 1}, std::vector<double>{1.0, -1.0});
  Tensor y = kernels::layer_norm(pair, Tensor({2}, 1.0), Tensor({2}, 0.0), 1e-5);
  EXPECT_NEAR(y[0], 0.99999500003749969, 1e-15);
  EXPECT_NEAR(y[1], -0.99999500003749969, 1e-15);

  Rng rng(2);
  Tensor x = rng.normal_tensor({5, 3, 4}, 2.0);
  Tensor z = kernels::layer_norm(x, Tensor({5}, 1.0), Tensor({5}, 0.0));
  for (std::size_t p = 0; p < 12; ++p) {
    double m = 0.0;
    for (std::size_t c = 0; c < 5; ++c) m += z[c * 12 + p];
    EXPECT_NEAR(m / 5.0, 0.0, 1e-9);
  }
}

TEST(Backward, ElementaryGradients) {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(0.0));
  Var y = ad::sum(tape, ad::softplus(tape, x));
  EXPECT_DOUBLE_EQ(tape.backward(y)[x][0], 0.5);

  Tape t2;
  Var v = t2.leaf(Rng(1).normal_tensor({3, 4}, 1.0));
  const auto g = t2.backward(ad::sum(t2, v));
  for (double e : g[v].data()) EXPECT_EQ(e, 1.0);
}

TEST(Backward, RootMustBeOnTapeAndScalar) {
  Tape tape;
  Var x = tape.leaf(Tensor({2}, 1.0));
  EXPECT_THROW(tape.backward(Var{42}), ContractViolation);
  EXPECT_THROW(tape.backward(x), ContractViolation);
}

TEST(Backward, ConvSoftplusSumMatchesFiniteDifferences) {
  Rng rng(21);
  Tensor x = rng.normal_tensor({2, 5, 5}, 1.0);
  Tensor w = rng.normal_tensor({3, 2, 3, 3}, 0.5);
  Tensor b = rng.normal_tensor({3}, 0.5);
  std::vector<double> params(w.values());
  params.insert(params.end(), b.values().begin(), b.values().end());
  params.insert(params.end(), x.values().begin(), x.values().end());
  const TapeFn f = [&](Tape& t, Var p) {
    Var wv = ad::slice(t, p, 0, w.shape());
    Var bv = ad::slice(t, p, w.size(), b.shape());
    Var xv = ad::slice(t, p, w.size() + b.size(), x.shape());
    return ad::sum(t, ad::softplus(t, ad::conv2d(t, xv, wv, bv, {1, 1})));
  };
  const auto r = finite_diff_check(f, params, {.h = 1e-6});
  EXPECT_LT(r.max_rel_error, 1e-5);
  EXPECT_EQ(r.checked, params.size());
}

// Random-shape gradient checks for every primitive that downstream modules compose.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferences) {
  Rng rng(100 + GetParam());
  const std::size_t c = 1 + rng.below(3), h = 2 * (1 + rng.below(3)), w = 2 * (1 + rng.below(3));
  const Tensor weights = rng.normal_tensor({c}, 1.0);
  const Tensor probe = rng.normal_tensor({c, h, w}, 1.0);
  const Tensor dw = rng.normal_tensor({c, 3, 3}, 0.5);
  const Tensor lin = rng.normal_tensor({3, w}, 0.5);
  auto composite = [&](Tape& t, Var x) {
    Var img = ad::reshape(t, x, {c, h, w});
    Var gain = t.constant(weights);
    Var shift = t.constant(Tensor({c}, 0.1));
    Var ln = ad::layer_norm(t, ad::tanh(t, img), gain, shift);
    Var dc = ad::depthwise_conv2d(t, ln, t.constant(dw), t.constant(Tensor({c}, 0.2)));
    Var act = ad::silu(t, ad::mul_const(t, dc, probe));
    Var pooled = ad::upsample_nearest2(t, ad::avg_pool2(t, act));
    Var cat = ad::concat_channels(t, {pooled, ad::transpose_hw(t, ad::transpose_hw(t, act))});
    Var seq = ad::reshape(t, cat, {2 * c * h, w});
    Var proj = ad::linear(t, seq, t.constant(lin), t.constant(Tensor({3}, -0.3)));
    Var e = ad::exp(t, ad::scale(t, proj, 0.3));
    return ad::mean(t, ad::mul(t, e, ad::add_scalar(t, e, 1.0)));
  };
  const Tensor x0 = rng.normal_tensor({c * h * w}, 1.0);
  const auto r = finite_diff_check(TapeFn(composite), x0.values(), {.h = 1e-6});
  EXPECT_LT(r.max_rel_error, 1e-6) << "worst index " << r.worst_index;
}

TEST_P(PrimitiveGradients, BilinearGridAndSource) {
  Rng rng(300 + GetParam());
  const std::size_t c = 2, h = 4, w = 5;
  const Tensor src = rng.normal_tensor({c, h, w}, 1.0);
  Tensor grid = kernels::identity_grid(h, w);
  // Offsets keep every coordinate away from integer kinks and from the border.
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      grid.at(0, i, j) = std::clamp(grid.at(0, i, j) + rng.uniform(-0.8, 0.8), 0.1, w - 1.1);
      grid.at(1, i, j) = std::clamp(grid.at(1, i, j) + rng.uniform(-0.8, 0.8), 0.1, h - 1.1);
      for (int a = 0; a < 2; ++a) {
        double& v = grid.at(a, i, j);
        if (std::abs(v - std::round(v)) < 0.05) v += 0.1;
      }
    }
  std::vector<double> params(src.values());
  params.insert(params.end(), grid.values().begin(), grid.values().end());
  const TapeFn f = [&](Tape& t, Var p) {
    Var s = ad::slice(t, p, 0, src.shape());
    Var g = ad::slice(t, p, src.size(), grid.shape());
    Var out = ad::bilinear_sample_2d(t, s, g);
    return ad::sum(t, ad::mul(t, out, out));
  };
  const auto r = finite_diff_check(f, params, {.h = 1e-6});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, PrimitiveGradients, ::testing::Range(0, 6));

TEST(Backward, ReplayIsBitIdentical) {
  Rng rng(9);
  Tensor x = rng.normal_tensor({3, 6, 6}, 1.0);
  Tensor w = rng.normal_tensor({4, 3, 3, 3}, 0.4);
  auto run = [&] {
    Tape t;
    Var xv = t.leaf(x);
    Var wv = t.leaf(w);
    Var y = ad::conv2d(t, xv, wv, t.constant(Tensor({4}, 0.1)), {1, 1});
    Var z = ad::layer_norm(t, ad::silu(t, y), t.constant(Tensor({4}, 1.0)), t.constant(Tensor({4})));
    Var loss = ad::mean(t, ad::mul(t, z, ad::add(t, z, ad::upsample_nearest2(t, ad::avg_pool2(t, z)))));
    auto g = t.backward(loss);
    return std::pair{g[xv], g[wv]};
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(FiniteDiffCheck, FixedCases) {
  const ScalarFn square = [](std::span<const double> x) { return x[0] * x[0]; };
  const std::vector<double> at3{3.0}, grad6{6.0};
  EXPECT_LE(finite_diff_check(square, grad6, at3, {.h = 1e-4}).max_rel_error, 1e-9);

  const TapeFn sp = [](Tape& t, Var p) { return ad::sum(t, ad::softplus(t, p)); };
  const std::vector<double> one{1.0};
  EXPECT_LE(finite_diff_check(sp, one, {.h = 1e-5}).max_rel_error, 1e-8);

  const ScalarFn constant = [](std::span<const double>) { return 4.0; };
  const std::vector<double> zero{0.0}, x{1.5};
  const auto r = finite_diff_check(constant, zero, x);
  EXPECT_EQ(r.max_rel_error, 0.0);
}

TEST(FiniteDiffCheck, ReportsNonFiniteIndex) {
  const ScalarFn f = [](std::span<const double> x) { return x[1] > 0.5 ? std::log(x[1] - 1.0 + 1e-7) : x[0]; };
  const std::vector<double> p{0.0, 1.0}, g{1.0, 0.0};
  const auto r = finite_diff_check(f, g, p, {.h = 1e-6});
  ASSERT_TRUE(r.nonfinite_index.has_value());
  EXPECT_EQ(*r.nonfinite_index, 1u);
  EXPECT_FALSE(r.passed(1.0));
  EXPECT_THROW(finite_diff_check(f, g, p, {.h = 1e-2}), ContractViolation);
}

TEST(FiniteDiffCheck, SkipsKinks) {
  const TapeFn f = [](Tape& t, Var p) { return ad::sum(t, ad::clamp(t, p, 0.0, 1.0)); };
  const std::vector<double> at{1.0, 0.5};
  const auto r = finite_diff_check(f, at, {.h = 1e-6, .skip_kinks = true});
  EXPECT_EQ(r.skipped_kinks, 1u);
  EXPECT_EQ(r.checked, 1u);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(Archive, RoundTripAndCorruption) {
  Rng rng(4);
  Archive a;
  a.header_json = R"({"k":1})";
  a.tensors.push_back({"alpha", rng.normal_tensor({2, 3}, 1.0)});
  a.tensors.push_back({"beta.gamma", Tensor::scalar(-0.0)});
  const auto bytes = serialize_archive(a);
  const Archive b = parse_archive(bytes);
  EXPECT_EQ(b.header_json, a.header_json);
  ASSERT_EQ(b.tensors.size(), 2u);
  EXPECT_EQ(b.tensors[0].value, a.tensors[0].value);
  EXPECT_EQ(serialize_archive(b), bytes);
  const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.end() - 5);
  EXPECT_THROW(parse_archive(truncated), IoError);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_archive(bad), IoError);
  EXPECT_THROW(read_archive(std::filesystem::temp_directory_path() / "definitely_missing.bin"), IoError);
}

}  // namespace
}  // namespace deshadow
