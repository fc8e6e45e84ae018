#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "deshadow/colorshift/colorshift.hpp"
#include "deshadow/crossgate/crossgate.hpp"
#include "deshadow/errors.hpp"
#include "deshadow/model/config.hpp"
#include "deshadow/model/network.hpp"
#include "deshadow/model/train.hpp"
#include "deshadow/numerics/ops.hpp"
#include "deshadow/numerics/random.hpp"
#include "deshadow/shadowlab/experiments.hpp"
#include "deshadow/shadowlab/gradcheck_suite.hpp"
#include "deshadow/shadowlab/image_io.hpp"
#include "deshadow/shadowlab/metrics.hpp"
#include "deshadow/shadowlab/synth.hpp"
#include "deshadow/ssm/ssm.hpp"

namespace deshadow::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  f << text;
  if (!f) throw IoError(path.string() + ": write failed");
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path.string() + ": cannot open for reading");
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

std::string sample_stem(std::size_t i) {
  std::ostringstream s;
  s << "sample_" << std::setw(4) << std::setfill('0') << i;
  return s.str();
}

// ---- synth

struct SynthArgs {
  std::size_t n = 4;
  std::uint64_t seed = 0;
  std::size_t size = 32;
  fs::path out;
};

int run_synth(const SynthArgs& a, std::ostream& out) {
  make_dir(a.out);
  ordered_json manifest{{"seed", a.seed}, {"size", a.size}, {"samples", ordered_json::array()}};
  for (std::size_t i = 0; i < a.n; ++i) {
    const auto s = shadowlab::synth_shadow_sample(shadowlab::sample_seed(a.seed, i), a.size, a.size);
    const std::string stem = sample_stem(i);
    shadowlab::write_png(a.out / (stem + "_input.png"), s.input);
    shadowlab::write_mask(a.out / (stem + "_mask.pgm"), s.mask);
    shadowlab::write_png(a.out / (stem + "_target.png"), s.target);
    manifest["samples"].push_back({{"name", stem},
                                   {"seed", s.seed},
                                   {"coverage", sum(s.mask) / static_cast<double>(s.mask.size())}});
  }
  write_text(a.out / "manifest.json", manifest.dump(2) + "\n");
  out << "wrote " << a.n << " samples to " << a.out.string() << "\n";
  return 0;
}

// Samples written by `synth`: <stem>_input.png, <stem>_mask.pgm, <stem>_target.png.
std::vector<model::Sample> load_dataset(const fs::path& dir) {
  std::error_code ec;
  fs::directory_iterator it(dir, ec);
  if (ec) throw IoError(dir.string() + ": " + ec.message());
  std::vector<std::string> stems;
  for (const auto& e : it) {
    const std::string name = e.path().filename().string();
    const std::string suffix = "_input.png";
    if (name.size() > suffix.size() && name.ends_with(suffix)) stems.push_back(name.substr(0, name.size() - suffix.size()));
  }
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) throw IoError(dir.string() + ": no *_input.png samples found");
  std::vector<model::Sample> data;
  for (const auto& stem : stems) {
    fs::path mask = dir / (stem + "_mask.pgm");
    if (!fs::exists(mask)) mask = dir / (stem + "_mask.png");
    data.push_back({shadowlab::read_png(dir / (stem + "_input.png")), shadowlab::read_mask(mask),
                    shadowlab::read_png(dir / (stem + "_target.png"))});
  }
  return data;
}

// ---- colorshift

struct ColorshiftArgs {
  fs::path image, mask, out;
  std::size_t clusters = colorshift::kDefaultClusters;
  std::uint64_t seed = 0;
};

const char* skip_name(colorshift::SkipReason r) {
  switch (r) {
    case colorshift::SkipReason::kNoShadow: return "no-shadow";
    case colorshift::SkipReason::kNoUsableNegative: return "no-usable-negative";
    case colorshift::SkipReason::kNone: break;
  }
  return "none";
}

int run_colorshift(const ColorshiftArgs& a, std::ostream& out) {
  Tensor image = shadowlab::read_png(a.image);
  const Tensor mask = shadowlab::read_mask(a.mask);
  require(mask.shape() == Shape{image.dim(1), image.dim(2)}, "colorshift: mask size does not match the image");
  image *= 255.0;
  const auto outcome = colorshift::build_negative_set(image, mask, a.clusters, a.seed);
  make_dir(a.out);
  ordered_json j;
  if (!outcome.set) {
    j["skipped"] = skip_name(outcome.skip);
    write_text(a.out / "manifest.json", j.dump(2) + "\n");
    out << "no negatives: " << skip_name(outcome.skip) << "\n";
    return 0;
  }
  const auto& set = *outcome.set;
  j = colorshift::manifest(set);
  ordered_json files = ordered_json::array();
  for (std::size_t n = 0; n < set.kept.size(); ++n) {
    std::ostringstream name;
    name << "negative_" << std::setw(2) << std::setfill('0') << set.kept[n] << ".png";
    Tensor scaled = set.negatives[n];
    scaled *= 1.0 / 255.0;
    shadowlab::write_png(a.out / name.str(), scaled);
    files.push_back(name.str());
  }
  j["files"] = files;
  write_text(a.out / "manifest.json", j.dump(2) + "\n");
  out << "kept " << set.kept.size() << " of " << set.centroids.size() << " negatives\n";
  return 0;
}

// ---- train

struct TrainArgs {
  fs::path config, data, resume, out;
  std::string stage = "all";
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  std::optional<std::size_t> steps;
  std::string ablate;
  std::size_t n = 8, size = 32, eval_n = 4;
};

std::vector<model::GateMode> parse_modes(const std::string& list) {
  if (list == "all")
    return {model::GateMode::kBaseline, model::GateMode::kHorizontal, model::GateMode::kVertical,
            model::GateMode::kFull};
  std::vector<model::GateMode> modes;
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');) modes.push_back(model::parse_gate_mode(item));
  if (modes.empty()) throw ConfigError("--ablate: empty mode list");
  return modes;
}

ordered_json stage_json(const model::StageReport& r) {
  return {{"steps", r.step_losses.size()}, {"initial_loss", r.initial_loss}, {"final_loss", r.final_loss}};
}

void append_losses(std::ostream& csv, int stage, const model::StageReport& r) {
  for (std::size_t t = 0; t < r.step_losses.size(); ++t) csv << stage << ',' << t << ',' << r.step_losses[t] << '\n';
}

int run_train(const TrainArgs& a, std::ostream& out) {
  if (a.stage != "1" && a.stage != "2" && a.stage != "all") throw ConfigError("--stage must be 1, 2 or all");
  std::optional<model::Checkpoint> resumed;
  if (!a.resume.empty()) resumed = model::load_checkpoint(a.resume);
  if (a.stage == "2" && !resumed) throw ConfigError("--stage 2 needs --resume with a stage-1 checkpoint");

  model::ModelConfig config = resumed ? resumed->config : model::ModelConfig{};
  if (!a.config.empty()) {
    const std::string text = read_text(a.config);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(a.config.string() + ": " + e.what());
    }
    config = model::config_from_json(j);
  }
  if (a.seed) config.seed = *a.seed;
  if (a.lambda) config.lambda = *a.lambda;
  if (a.steps) config.steps_stage1 = config.steps_stage2 = *a.steps;
  std::vector<model::GateMode> modes;
  if (!a.ablate.empty()) {
    modes = parse_modes(a.ablate);
    config.gates = modes.front();
  }
  config.validate();
  if (modes.size() > 1 && a.stage != "all") throw ConfigError("--ablate with several modes needs --stage all");

  const auto data = a.data.empty() ? shadowlab::synth_dataset(config.seed, a.n, a.size) : load_dataset(a.data);
  // Held-out samples match the training side when the data is square.
  const Tensor& first = data.front().input;
  const std::size_t eval_size = first.dim(1) == first.dim(2) && first.dim(1) >= 16 ? first.dim(1) : a.size;
  const auto heldout = shadowlab::synth_dataset(shadowlab::heldout_seed(config.seed), a.eval_n, eval_size);
  make_dir(a.out);
  std::ostringstream csv;
  csv << std::setprecision(17) << "stage,step,loss\n";
  ordered_json report{{"config", model::to_json(config)}, {"samples", data.size()}};

  if (modes.size() > 1) {
    const auto result = shadowlab::run_ablation(modes, config, data, heldout);
    append_losses(csv, 1, result.stage1);
    report["stage1"] = stage_json(result.stage1);
    ordered_json rows = ordered_json::array();
    for (std::size_t r = 0; r < result.rows.size(); ++r) {
      const auto& row = result.rows[r];
      const std::string mode = model::to_string(row.mode);
      model::ModelConfig c = config;
      c.gates = row.mode;
      model::save_checkpoint(a.out / ("checkpoint_" + mode + ".dshw"), result.states[r], c);
      rows.push_back({{"mode", mode}, {"stage2", stage_json(row.stage2)}, {"metrics", shadowlab::to_json(row.metrics)}});
      out << mode << ": stage-2 loss " << row.stage2.initial_loss << " -> " << row.stage2.final_loss
          << ", shadow LAB RMSE "
          << (row.metrics.lab_rmse_shadow ? std::to_string(*row.metrics.lab_rmse_shadow) : std::string("n/a")) << "\n";
    }
    report["ablation"] = rows;
  } else {
    model::TrainState state = resumed ? resumed->state : model::init_state(config);
    if (a.stage != "2") {
      const auto r1 = model::train_stage1(state, data, config);
      append_losses(csv, 1, r1);
      report["stage1"] = stage_json(r1);
      out << "stage 1: loss " << r1.initial_loss << " -> " << r1.final_loss << "\n";
    }
    if (a.stage != "1") {
      const auto r2 = model::train_stage2(state, data, config, model::make_extractor(config));
      append_losses(csv, 2, r2);
      report["stage2"] = stage_json(r2);
      out << "stage 2: loss " << r2.initial_loss << " -> " << r2.final_loss << "\n";
      report["metrics"] = shadowlab::to_json(shadowlab::evaluate(state.params, config, heldout));
    }
    model::save_checkpoint(a.out / "checkpoint.dshw", state, config);
  }
  write_text(a.out / "losses.csv", csv.str());
  write_text(a.out / "report.json", report.dump(2) + "\n");
  return 0;
}

// ---- infer

struct InferArgs {
  fs::path checkpoint, image, mask, out, gates;
};

int run_infer(const InferArgs& a, std::ostream& out) {
  const auto ck = model::load_checkpoint(a.checkpoint);
  const Tensor image = shadowlab::read_png(a.image);
  const Tensor mask = shadowlab::read_mask(a.mask);
  model::require_model_input(image, mask);
  shadowlab::write_png(a.out, model::forward(ck.state.params, image, mask, ck.config));
  if (!a.gates.empty()) {
    make_dir(a.gates);
    const auto maps = model::inspect_gates(ck.state.params, image, mask, ck.config);
    shadowlab::write_gray_png(a.gates / "gate_horizontal.png", crossgate::to_display(maps.horizontal));
    shadowlab::write_gray_png(a.gates / "gate_vertical.png", crossgate::to_display(maps.vertical));
  }
  out << "wrote " << a.out.string() << "\n";
  return 0;
}

// ---- eval

struct EvalArgs {
  fs::path pred, target, mask, out;
};

int run_eval(const EvalArgs& a, std::ostream& out) {
  const auto report = shadowlab::region_metrics(shadowlab::read_png(a.pred), shadowlab::read_png(a.target),
                                                shadowlab::read_mask(a.mask));
  const std::string text = shadowlab::to_json(report).dump(2) + "\n";
  if (!a.out.empty()) write_text(a.out, text);
  out << text;
  return 0;
}

// ---- gradcheck

int run_gradcheck(std::uint64_t seed, std::ostream& out, std::ostream& err) {
  bool ok = true;
  out << std::left << std::setw(20) << "check" << std::setw(14) << "max_rel_error" << std::setw(11) << "tolerance"
      << std::setw(9) << "checked" << std::setw(9) << "skipped" << "status\n";
  for (const auto& e : shadowlab::run_gradcheck_suite(seed)) {
    std::ostringstream errv, tol;
    errv << std::scientific << std::setprecision(3) << e.max_rel_error;
    tol << std::scientific << std::setprecision(0) << e.tolerance;
    out << std::setw(20) << e.name << std::setw(14) << errv.str() << std::setw(11) << tol.str() << std::setw(9)
        << e.checked << std::setw(9) << e.skipped_kinks << (e.passed ? "ok" : "FAIL") << "\n";
    ok = ok && e.passed;
  }
  if (!ok) err << "gradcheck: at least one check exceeded its tolerance\n";
  return ok ? 0 : 1;
}

// ---- bench

struct BenchArgs {
  std::vector<std::size_t> lengths{64, 128, 256, 512, 1024, 2048};
  std::vector<std::size_t> state_dims{4, 16};
  std::size_t channels = 4;
  std::size_t repeats = 3;
  fs::path out;
};

template <typename F>
double ns_per_step(F&& run, std::size_t length, std::size_t repeats) {
  run();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t r = 0; r < repeats; ++r) run();
  const auto dt = std::chrono::duration<double, std::nano>(std::chrono::steady_clock::now() - t0).count();
  return dt / static_cast<double>(repeats * length);
}

int run_bench(const BenchArgs& a, std::ostream& out) {
  require(a.repeats > 0 && a.channels > 0, "bench: repeats and channels must be positive");
  std::ostringstream csv;
  csv << "L,Z,mode,ns_per_step\n" << std::fixed << std::setprecision(1);
  Rng rng(0);
  for (const std::size_t z : a.state_dims)
    for (const std::size_t len : a.lengths) {
      const auto params = ssm::ContinuousParams::init(a.channels, z, rng);
      const Tensor x = rng.normal_tensor({len, a.channels}, 1.0);
      volatile double sink = 0.0;
      csv << len << ',' << z << ",recurrent,"
          << ns_per_step([&] { sink = sink + ssm::selective_scan(x, params)[0]; }, len, a.repeats) << '\n';
      csv << len << ',' << z << ",recurrent_grad,"
          << ns_per_step(
                 [&] {
                   ad::Tape tape;
                   const auto vars = ssm::bind(tape, params);
                   const auto y = ssm::selective_scan(tape, tape.leaf(x), vars);
                   sink = sink + tape.backward(ad::sum(tape, y))[vars.a_log][0];
                 },
                 len, a.repeats)
          << '\n';
      if (len <= ssm::kOracleMaxLength)
        csv << len << ',' << z << ",matrix_oracle,"
            << ns_per_step([&] { sink = sink + ssm::scan_matrix_oracle(x, params)[0]; }, len, a.repeats) << '\n';
    }
  if (!a.out.empty()) write_text(a.out, csv.str());
  out << csv.str();
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shadow removal with gated selective scans", "deshadow"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write synthetic shadow samples");
  s->add_option("--n", synth.n, "Number of samples")->capture_default_str();
  s->add_option("--seed", synth.seed, "Set seed")->capture_default_str();
  s->add_option("--size", synth.size, "Side length (multiple of 4, >= 16)")->capture_default_str();
  s->add_option("--out", synth.out, "Output directory")->required();

  ColorshiftArgs cs;
  auto* c = app.add_subcommand("colorshift", "Build the negative set of one image");
  c->add_option("--image", cs.image, "Shadow-free RGB PNG")->required();
  c->add_option("--mask", cs.mask, "Shadow mask (PGM or PNG)")->required();
  c->add_option("--out", cs.out, "Output directory")->required();
  c->add_option("--clusters", cs.clusters, "Dominant colors")->capture_default_str();
  c->add_option("--seed", cs.seed, "k-means seed")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Two-stage training");
  t->add_option("--config", tr.config, "JSON model/training config");
  t->add_option("--data", tr.data, "Directory written by synth (default: generate from --seed)");
  t->add_option("--n", tr.n, "Generated training samples")->capture_default_str();
  t->add_option("--size", tr.size, "Generated sample side")->capture_default_str();
  t->add_option("--eval-n", tr.eval_n, "Held-out samples for the metrics report")->capture_default_str();
  t->add_option("--stage", tr.stage, "1, 2 or all")->capture_default_str();
  t->add_option("--resume", tr.resume, "Checkpoint to continue from");
  t->add_option("--seed", tr.seed, "Overrides the config seed");
  t->add_option("--lambda", tr.lambda, "Overrides the contrastive weight");
  t->add_option("--steps", tr.steps, "Overrides the step count of both stages");
  t->add_option("--ablate", tr.ablate, "Gate mode, comma list, or 'all' (baseline,gh,gv,full,no-offset)");
  t->add_option("--out", tr.out, "Output directory")->required();

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "Remove the shadow from one image");
  i->add_option("--checkpoint", inf.checkpoint, "Trained checkpoint")->required();
  i->add_option("--image", inf.image, "Shadow image (PNG)")->required();
  i->add_option("--mask", inf.mask, "Shadow mask (PGM or PNG)")->required();
  i->add_option("--out", inf.out, "Output PNG")->required();
  i->add_option("--gates", inf.gates, "Directory for gate-map visualizations");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Region metrics of a prediction as JSON");
  e->add_option("--pred", ev.pred, "Predicted PNG")->required();
  e->add_option("--target", ev.target, "Ground-truth PNG")->required();
  e->add_option("--mask", ev.mask, "Shadow mask (PGM or PNG)")->required();
  e->add_option("--out", ev.out, "Also write the JSON here");

  std::uint64_t gc_seed = 0;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  g->add_option("--seed", gc_seed, "Input seed")->capture_default_str();

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Scan throughput sweep as CSV");
  b->add_option("--lengths", bench.lengths, "Sequence lengths")->delimiter(',');
  b->add_option("--state-dims", bench.state_dims, "State sizes")->delimiter(',');
  b->add_option("--channels", bench.channels, "Channels")->capture_default_str();
  b->add_option("--repeats", bench.repeats, "Timed repetitions")->capture_default_str();
  b->add_option("--out", bench.out, "Also write the CSV here");

  std::vector<const char*> argv{"deshadow"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (s->parsed()) return run_synth(synth, out);
    if (c->parsed()) return run_colorshift(cs, out);
    if (t->parsed()) return run_train(tr, out);
    if (i->parsed()) return run_infer(inf, out);
    if (e->parsed()) return run_eval(ev, out);
    if (g->parsed()) return run_gradcheck(gc_seed, out, err);
    if (b->parsed()) return run_bench(bench, out);
  } catch (const IoError& ex) {
    err << "io error: " << ex.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& ex) {
    err << "io error: " << ex.what() << "\n";
    return 2;
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << "\n";
    return 1;
  } catch (const ContractViolation& ex) {
    err << "error: " << ex.what() << "\n";
    return 1;
  } catch (const NumericalError& ex) {
    err << "numerical error: " << ex.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace deshadow::cli
