#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include <gtest/gtest.h>

#include "deshadow/colorshift/colorshift.hpp"
#include "deshadow/errors.hpp"
#include "deshadow/numerics/random.hpp"
#include "deshadow/shadowlab/experiments.hpp"
#include "deshadow/shadowlab/gradcheck_suite.hpp"
#include "deshadow/shadowlab/image_io.hpp"
#include "deshadow/shadowlab/metrics.hpp"
#include "deshadow/shadowlab/synth.hpp"

namespace deshadow::shadowlab {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("deshadow_shadowlab_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Tensor solid(std::size_t h, std::size_t w, double v) { return Tensor({3, h, w}, v); }

TEST(Synth, SameSeedSameSample) {
  const auto a = synth_shadow_sample(42, 32, 24), b = synth_shadow_sample(42, 32, 24);
  EXPECT_EQ(a.input, b.input);
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_EQ(a.target, b.target);
  EXPECT_EQ(a.seed, b.seed);
  EXPECT_NE(synth_shadow_sample(43, 32, 24).target, a.target);
}

TEST(Synth, GeneratorContracts) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto s = synth_shadow_sample(seed, 16 + 4 * (seed % 5), 32);
    const std::size_t plane = s.mask.size();
    const double coverage = sum(s.mask) / static_cast<double>(plane);
    EXPECT_GE(coverage, kMinCoverage);
    EXPECT_LE(coverage, kMaxCoverage);
    bool darker = false;
    for (std::size_t p = 0; p < plane; ++p) {
      ASSERT_TRUE(s.mask[p] == 0.0 || s.mask[p] == 1.0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double in = s.input[c * plane + p], gt = s.target[c * plane + p];
        ASSERT_GE(in, 0.0);
        ASSERT_LE(in, 1.0);
        ASSERT_EQ(std::round(in * 255.0), in * 255.0);
        ASSERT_EQ(std::round(gt * 255.0), gt * 255.0);
        if (s.mask[p] == 0.0) {
          ASSERT_EQ(in, gt) << "seed " << seed << " pixel " << p;
        }
        darker = darker || (s.mask[p] == 1.0 && in < gt);
      }
    }
    EXPECT_TRUE(darker) << "seed " << seed;
  }
}

TEST(Synth, UnitGainZeroOffsetIsShadowless) {
  const SynthOptions opts{std::array<double, 3>{1.0, 1.0, 1.0}, std::array<double, 3>{0.0, 0.0, 0.0}};
  for (std::uint64_t seed : {1u, 5u, 9u}) {
    const auto s = synth_shadow_sample(seed, 24, 24, opts);
    EXPECT_EQ(s.input, s.target);
    EXPECT_GT(sum(s.mask), 0.0);
  }
}

TEST(Synth, RejectsBadSizes) {
  EXPECT_THROW(synth_shadow_sample(1, 12, 16), ContractViolation);
  EXPECT_THROW(synth_shadow_sample(1, 18, 16), ContractViolation);
  EXPECT_THROW(synth_shadow_sample(1, 16, 30), ContractViolation);
}

TEST(Psnr, Fixtures) {
  const Tensor a = solid(8, 8, 0.3);
  EXPECT_EQ(psnr(a, a), std::numeric_limits<double>::infinity());
  EXPECT_EQ(psnr(solid(8, 8, 0.1), solid(8, 8, 0.0)), 20.0);
  EXPECT_EQ(psnr(solid(8, 8, 0.6), solid(8, 8, 0.5)), 20.0);
  Rng rng(3);
  const Tensor x = rng.uniform_tensor({3, 9, 7}, 0.0, 1.0), y = rng.uniform_tensor({3, 9, 7}, 0.0, 1.0);
  EXPECT_EQ(psnr(x, y), psnr(y, x));
  EXPECT_THROW(psnr(x, solid(9, 8, 0.0)), ContractViolation);
}

// Straight-formula SSIM using raw moment sums.
double ssim_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t h = a.dim(1), w = a.dim(2);
  auto gray = [&](const Tensor& t, std::size_t i, std::size_t j) {
    return (t.at(0, i, j) + t.at(1, i, j) + t.at(2, i, j)) / 3.0;
  };
  double total = 0.0;
  int windows = 0;
  for (std::size_t bi = 0; bi < h / 8; ++bi)
    for (std::size_t bj = 0; bj < w / 8; ++bj) {
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      for (std::size_t i = 8 * bi; i < 8 * bi + 8; ++i)
        for (std::size_t j = 8 * bj; j < 8 * bj + 8; ++j) {
          const double x = gray(a, i, j), y = gray(b, i, j);
          sx += x, sy += y, sxx += x * x, syy += y * y, sxy += x * y;
        }
      const double mx = sx / 64, my = sy / 64;
      const double vx = sxx / 64 - mx * mx, vy = syy / 64 - my * my, cxy = sxy / 64 - mx * my;
      const double c1 = 1e-4, c2 = 9e-4;
      total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++windows;
    }
  return total / windows;
}

TEST(Ssim, SelfIsExactlyOneAndInversionLowers) {
  Rng rng(4);
  const Tensor a = rng.uniform_tensor({3, 16, 24}, 0.0, 1.0);
  EXPECT_EQ(ssim(a, a), 1.0);
  Tensor inv = a;
  for (double& v : inv.data()) v = 1.0 - v;
  EXPECT_LT(ssim(a, inv), 1.0);
  EXPECT_THROW(ssim(solid(7, 16, 0.0), solid(7, 16, 0.0)), ContractViolation);
}

TEST(Ssim, MatchesFormulaOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor a = rng.uniform_tensor({3, 16, 16}, 0.0, 1.0);
    Tensor b = a;
    for (double& v : b.data()) v = std::clamp(v + 0.1 * rng.normal(), 0.0, 1.0);
    EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b), 1e-10);
  }
  // Trailing rows and columns past the last full window are ignored.
  const Tensor a = rng.uniform_tensor({3, 19, 21}, 0.0, 1.0), b = rng.uniform_tensor({3, 19, 21}, 0.0, 1.0);
  EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b), 1e-10);
}

TEST(RegionMetrics, IdenticalImages) {
  const auto s = synth_shadow_sample(2, 16, 16);
  const auto r = region_metrics(s.target, s.target, s.mask);
  EXPECT_EQ(*r.lab_rmse_shadow, 0.0);
  EXPECT_EQ(*r.lab_rmse_nonshadow, 0.0);
  EXPECT_EQ(r.lab_rmse_all, 0.0);
  EXPECT_EQ(r.psnr, std::numeric_limits<double>::infinity());
  EXPECT_EQ(r.ssim, 1.0);
  EXPECT_EQ(r.shadow_pixels + r.nonshadow_pixels, 256u);
  EXPECT_EQ(to_json(r)["psnr"], "inf");
}

TEST(RegionMetrics, DifferenceConfinedToMask) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = synth_shadow_sample(seed, 16, 20);
    const auto r = region_metrics(s.input, s.target, s.mask);
    EXPECT_EQ(*r.lab_rmse_nonshadow, 0.0);
    EXPECT_GT(*r.lab_rmse_shadow, 0.0);
    EXPECT_EQ(r.shadow_pixels + r.nonshadow_pixels, 320u);
  }
}

TEST(RegionMetrics, EmptyRegionIsNull) {
  const Tensor a = solid(8, 8, 0.2), b = solid(8, 8, 0.4);
  const auto r = region_metrics(a, b, Tensor({8, 8}));
  EXPECT_FALSE(r.lab_rmse_shadow.has_value());
  ASSERT_TRUE(r.lab_rmse_nonshadow.has_value());
  EXPECT_NEAR(*r.lab_rmse_nonshadow, r.lab_rmse_all, 1e-12);
  EXPECT_TRUE(to_json(r)["lab_rmse_shadow"].is_null());
  EXPECT_THROW(region_metrics(a, b, Tensor({8, 8}, 0.5)), ContractViolation);
}

// A hand-built 2x2 scene tiled over 8x8 (the smallest SSIM-valid size); the
// region means are those of the 2x2 tile.
TEST(RegionMetrics, HandBuiltTwoByTwo) {
  const colorshift::Color pred[4] = {{0.5, 0.5, 0.5}, {1.0, 0.0, 0.0}, {0.2, 0.4, 0.6}, {0.0, 0.0, 0.0}};
  const colorshift::Color gt[4] = {{0.5, 0.5, 0.5}, {0.8, 0.1, 0.1}, {0.3, 0.3, 0.3}, {0.1, 0.1, 0.1}};
  const double mask_tile[4] = {0, 1, 1, 0};
  Tensor p({3, 8, 8}), g({3, 8, 8}), m({8, 8});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      const std::size_t k = 2 * (i % 2) + j % 2;
      m.at(i, j) = mask_tile[k];
      for (std::size_t c = 0; c < 3; ++c) p.at(c, i, j) = pred[k][c], g.at(c, i, j) = gt[k][c];
    }
  double sq[4];
  for (int k = 0; k < 4; ++k) {
    const auto lp = colorshift::srgb_to_lab({pred[k][0] * 255, pred[k][1] * 255, pred[k][2] * 255});
    const auto lg = colorshift::srgb_to_lab({gt[k][0] * 255, gt[k][1] * 255, gt[k][2] * 255});
    sq[k] = 0.0;
    for (int c = 0; c < 3; ++c) sq[k] += (lp[c] - lg[c]) * (lp[c] - lg[c]);
  }
  const auto r = region_metrics(p, g, m);
  EXPECT_NEAR(*r.lab_rmse_shadow, std::sqrt((sq[1] + sq[2]) / 6.0), 1e-12);
  EXPECT_NEAR(*r.lab_rmse_nonshadow, std::sqrt((sq[0] + sq[3]) / 6.0), 1e-12);
  EXPECT_NEAR(r.lab_rmse_all, std::sqrt((sq[0] + sq[1] + sq[2] + sq[3]) / 12.0), 1e-12);
  EXPECT_EQ(r.shadow_pixels, 32u);
  EXPECT_EQ(r.nonshadow_pixels, 32u);
}

TEST(MeanReport, AveragesPresentRegions) {
  MetricsReport a, b;
  a.lab_rmse_shadow = 2.0;
  a.lab_rmse_all = 1.0;
  a.psnr = 10.0;
  a.shadow_pixels = 3;
  b.lab_rmse_all = 3.0;
  b.psnr = 20.0;
  b.nonshadow_pixels = 5;
  const MetricsReport reports[] = {a, b};
  const auto m = mean_report(reports);
  EXPECT_EQ(*m.lab_rmse_shadow, 2.0);
  EXPECT_FALSE(m.lab_rmse_nonshadow.has_value());
  EXPECT_EQ(m.lab_rmse_all, 2.0);
  EXPECT_EQ(m.psnr, 15.0);
  EXPECT_EQ(m.shadow_pixels + m.nonshadow_pixels, 8u);
}

TEST(ImageIo, PngRoundTripIsLossless) {
  const fs::path dir = scratch_dir("png");
  const auto s = synth_shadow_sample(11, 20, 28);
  write_png(dir / "x.png", s.input);
  EXPECT_EQ(read_png(dir / "x.png"), s.input);
  write_png(dir / "x.png", s.input);
  std::ifstream f1(dir / "x.png", std::ios::binary);
  const std::string first((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  write_png(dir / "y.png", read_png(dir / "x.png"));
  std::ifstream f2(dir / "y.png", std::ios::binary);
  const std::string second((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  EXPECT_EQ(first, second);
}

TEST(ImageIo, MaskThresholdAndRoundTrip) {
  const fs::path dir = scratch_dir("mask");
  {
    std::ofstream f(dir / "m.pgm", std::ios::binary);
    f << "P5\n# comment\n3 2\n255\n";
    for (unsigned char v : {0, 127, 128, 255, 200, 1}) f.put(static_cast<char>(v));
  }
  const Tensor m = read_mask(dir / "m.pgm");
  EXPECT_EQ(m, Tensor({2, 3}, std::vector<double>{0, 0, 1, 1, 1, 0}));
  write_mask(dir / "n.pgm", m);
  EXPECT_EQ(read_mask(dir / "n.pgm"), m);
  Tensor gray({2, 3}, std::vector<double>{0, 255, 255, 0, 128, 127});
  write_gray_png(dir / "m.png", gray);
  EXPECT_EQ(read_mask(dir / "m.png"), Tensor({2, 3}, std::vector<double>{0, 1, 1, 0, 1, 0}));
}

TEST(ImageIo, ErrorsCarryThePath) {
  const fs::path dir = scratch_dir("errors");
  const auto s = synth_shadow_sample(3, 16, 16);
  write_png(dir / "ok.png", s.input);
  std::ifstream in(dir / "ok.png", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  {
    std::ofstream f(dir / "cut.png", std::ios::binary);
    f << bytes.substr(0, bytes.size() / 2);
  }
  {
    std::ofstream f(dir / "cut.pgm", std::ios::binary);
    f << "P5\n4 4\n255\n" << std::string(7, '\xff');
  }
  {
    std::ofstream f(dir / "junk.png", std::ios::binary);
    f << "not an image";
  }
  for (const char* name : {"cut.png", "cut.pgm", "junk.png", "missing.png"}) {
    try {
      if (std::string(name).ends_with(".pgm"))
        read_mask(dir / name);
      else
        read_png(dir / name);
      ADD_FAILURE() << name << " did not throw";
    } catch (const IoError& e) {
      EXPECT_NE(std::string(e.what()).find(name), std::string::npos) << e.what();
    }
  }
}

TEST(GradcheckSuite, EveryCheckPasses) {
  const auto entries = run_gradcheck_suite(123);
  ASSERT_EQ(entries.size(), 9u);
  for (const auto& e : entries) {
    EXPECT_TRUE(e.passed) << e.name << " " << e.max_rel_error;
    EXPECT_GT(e.checked, 0u) << e.name;
  }
  EXPECT_EQ(entries.back().tolerance, kEndToEndTolerance);
}

TEST(Experiments, SyntheticSetsAndAblationRows) {
  EXPECT_NE(sample_seed(1, 0), sample_seed(1, 1));
  const auto train = synth_dataset(1, 2, 16), heldout = synth_dataset(heldout_seed(1), 1, 16);
  EXPECT_NE(train[0].target, heldout[0].target);
  model::ModelConfig c;
  c.channels = 4;
  c.state_dim = 2;
  c.steps_stage1 = c.steps_stage2 = 2;
  const model::GateMode modes[] = {model::GateMode::kBaseline, model::GateMode::kFull};
  const auto r = run_ablation(modes, c, train, heldout);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.stage1.step_losses.size(), 2u);
  for (const auto& row : r.rows) {
    EXPECT_EQ(row.stage2.step_losses.size(), 2u);
    EXPECT_EQ(row.metrics.shadow_pixels + row.metrics.nonshadow_pixels, 256u);
  }
  // Both rows start stage 2 from the same stage-1 coarse unit.
  for (const auto& e : r.states[0].params.entries())
    if (model::is_coarse(e.name)) {
      EXPECT_EQ(e.value, r.states[1].params.get(e.name)) << e.name;
    }
}

}  // namespace
}  // namespace deshadow::shadowlab
