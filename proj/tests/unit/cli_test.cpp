#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "cli.hpp"

namespace deshadow::cli {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("deshadow_cli_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Every regular file under a, byte-compared with its twin under b.
void expect_same_tree(const fs::path& a, const fs::path& b) {
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path twin = b / fs::relative(e.path(), a);
    ASSERT_TRUE(fs::exists(twin)) << twin;
    EXPECT_EQ(slurp(e.path()), slurp(twin)) << e.path();
    ++files;
  }
  std::size_t other = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) other += e.is_regular_file();
  EXPECT_EQ(files, other);
  EXPECT_GT(files, 0u);
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run({}).code, 1);
  const CliRun unknown = run({"synth", "--out", "x", "--frobnicate"});
  EXPECT_EQ(unknown.code, 1);
  EXPECT_NE(unknown.err.find("Usage"), std::string::npos);
  EXPECT_EQ(run({"nonsense"}).code, 1);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST(Cli, SynthIsReproducible) {
  const fs::path a = scratch_dir("synth_a"), b = scratch_dir("synth_b");
  ASSERT_EQ(run({"synth", "--n", "4", "--seed", "7", "--size", "32", "--out", a.string()}).code, 0);
  ASSERT_EQ(run({"synth", "--n", "4", "--seed", "7", "--size", "32", "--out", b.string()}).code, 0);
  expect_same_tree(a, b);
  EXPECT_TRUE(fs::exists(a / "sample_0003_mask.pgm"));
  EXPECT_EQ(run({"synth", "--n", "1", "--size", "30", "--out", a.string()}).code, 1);
}

TEST(Cli, EvalIdenticalImages) {
  const fs::path d = scratch_dir("eval");
  ASSERT_EQ(run({"synth", "--n", "1", "--seed", "2", "--size", "16", "--out", d.string()}).code, 0);
  const std::string target = (d / "sample_0000_target.png").string(), mask = (d / "sample_0000_mask.pgm").string();
  const CliRun r = run({"eval", "--pred", target, "--target", target, "--mask", mask});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["lab_rmse_all"], 0.0);
  EXPECT_EQ(j["lab_rmse_shadow"], 0.0);
  EXPECT_EQ(j["ssim"], 1.0);
  EXPECT_EQ(j["psnr"], "inf");
  EXPECT_EQ(j["shadow_pixels"].get<int>() + j["nonshadow_pixels"].get<int>(), 256);
}

TEST(Cli, IoErrorsExitTwo) {
  const fs::path d = scratch_dir("io");
  const CliRun r = run({"eval", "--pred", (d / "a.png").string(), "--target", (d / "b.png").string(), "--mask",
                     (d / "m.pgm").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(d.string()), std::string::npos);
  EXPECT_EQ(run({"train", "--data", (d / "none").string(), "--out", (d / "o").string()}).code, 2);
}

TEST(Cli, ColorshiftIsReproducible) {
  const fs::path d = scratch_dir("cs"), a = scratch_dir("cs_a"), b = scratch_dir("cs_b");
  ASSERT_EQ(run({"synth", "--n", "1", "--seed", "4", "--size", "24", "--out", d.string()}).code, 0);
  const std::string img = (d / "sample_0000_target.png").string(), mask = (d / "sample_0000_mask.pgm").string();
  ASSERT_EQ(run({"colorshift", "--image", img, "--mask", mask, "--seed", "3", "--out", a.string()}).code, 0);
  ASSERT_EQ(run({"colorshift", "--image", img, "--mask", mask, "--seed", "3", "--out", b.string()}).code, 0);
  expect_same_tree(a, b);
  const auto j = nlohmann::json::parse(slurp(a / "manifest.json"));
  for (const char* key : {"shadow_color", "centroids", "ratios", "candidate_difficulties", "difficulty_mean",
                          "difficulty_stddev", "weights", "files"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["files"].size(), j["weights"].size());
}

TEST(Cli, TrainInferAndAblate) {
  const fs::path a = scratch_dir("train_a"), b = scratch_dir("train_b"), ab = scratch_dir("ablate");
  const std::vector<std::string> common{"train", "--n", "2", "--size", "16", "--steps", "2", "--seed", "9"};
  auto with_out = [&](const fs::path& out, std::vector<std::string> extra = {}) {
    auto args = common;
    args.insert(args.end(), extra.begin(), extra.end());
    args.push_back("--out");
    args.push_back(out.string());
    return args;
  };
  ASSERT_EQ(run(with_out(a)).code, 0);
  ASSERT_EQ(run(with_out(b)).code, 0);
  expect_same_tree(a, b);
  const auto report = nlohmann::json::parse(slurp(a / "report.json"));
  EXPECT_EQ(report["config"]["seed"], 9);
  EXPECT_TRUE(report["metrics"].contains("lab_rmse_shadow"));

  const fs::path d = scratch_dir("train_data");
  ASSERT_EQ(run({"synth", "--n", "1", "--seed", "1", "--size", "16", "--out", d.string()}).code, 0);
  const CliRun inf = run({"infer", "--checkpoint", (a / "checkpoint.dshw").string(), "--image",
                       (d / "sample_0000_input.png").string(), "--mask", (d / "sample_0000_mask.pgm").string(),
                       "--out", (a / "pred.png").string(), "--gates", (a / "gates").string()});
  ASSERT_EQ(inf.code, 0) << inf.err;
  EXPECT_TRUE(fs::exists(a / "pred.png"));
  EXPECT_TRUE(fs::exists(a / "gates" / "gate_vertical.png"));

  ASSERT_EQ(run(with_out(ab, {"--ablate", "baseline,gh,gv,full"})).code, 0);
  const auto abl = nlohmann::json::parse(slurp(ab / "report.json"));
  ASSERT_EQ(abl["ablation"].size(), 4u);
  for (const auto& row : abl["ablation"]) EXPECT_TRUE(row["metrics"].contains("psnr"));

  EXPECT_EQ(run(with_out(scratch_dir("bad"), {"--ablate", "diagonal"})).code, 1);
  EXPECT_EQ(run(with_out(scratch_dir("bad"), {"--stage", "2"})).code, 1);
}

TEST(Cli, GradcheckAndBench) {
  const CliRun g = run({"gradcheck", "--seed", "5"});
  EXPECT_EQ(g.code, 0) << g.out;
  EXPECT_EQ(g.out.find("FAIL"), std::string::npos);
  const CliRun b = run({"bench", "--lengths", "16,32", "--state-dims", "2", "--repeats", "1"});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(b.out.rfind("L,Z,mode,ns_per_step\n", 0), 0u);
  EXPECT_NE(b.out.find("32,2,matrix_oracle,"), std::string::npos);
}

}  // namespace
}  // namespace deshadow::cli
