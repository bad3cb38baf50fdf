// Command-line driver: checks, experiments, training and evaluation.
//
// Exit codes: 0 success, 1 a check failed (or training diverged), 2 usage or
// configuration error.

#include <algorithm>
#include <array>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cloudtf/config.hpp"
#include "cloudtf/experiments.hpp"
#include "cloudtf/io.hpp"
#include "cloudtf/raster.hpp"
#include "cloudtf/synthetic.hpp"
#include "cloudtf/train.hpp"

namespace fs = std::filesystem;
using namespace cloudtf;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shared by train, ablate: task defaults, then --config file, then --set.
struct ConfigFlags {
  std::string task = "seg";
  std::string config_file;
  std::vector<std::string> sets;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "override one key (key=value), repeatable");
  }

  TrainConfig build() const {
    TrainConfig cfg = TrainConfig::defaults(parse_task(task));
    if (!config_file.empty()) cfg.apply(KeyValueConfig::load(config_file));
    KeyValueConfig kv;
    for (const auto& s : sets) kv.set_assignment(s);
    cfg.apply(kv);
    return cfg;
  }
};

void print_metrics(const std::map<std::string, double>& metrics) {
  for (const auto& [k, v] : metrics) std::printf("  %-28s %.6f\n", k.c_str(), v);
}

int cmd_gradcheck(const std::string& scope, const std::string& target, std::uint64_t seed, double step,
                  double tolerance) {
  GradcheckOptions opts;
  opts.step = step;
  opts.tolerance = tolerance;
  std::vector<experiments::GradcheckRow> rows;
  if (!target.empty()) {
    rows.push_back(experiments::run_gradcheck_target(target, seed, opts));
  } else {
    for (const auto& name : experiments::gradcheck_targets(experiments::parse_grad_scope(scope))) {
      rows.push_back(experiments::run_gradcheck_target(name, seed, opts));
      const auto& r = rows.back();
      std::printf("%-6s %-28s %-4s max_rel %.3e  entries %zu  straddling %zu  margin %.2e\n", r.scope.c_str(),
                  r.target.c_str(), r.passed ? "ok" : "FAIL", r.max_rel_error, r.entries, r.straddling, r.kink_margin);
      if (!r.passed) std::printf("       worst: %s\n", r.worst.c_str());
      std::fflush(stdout);
    }
  }
  if (!target.empty()) {
    const auto& r = rows.back();
    std::printf("%-6s %-28s %-4s max_rel %.3e  entries %zu  straddling %zu  margin %.2e\n       worst: %s\n",
                r.scope.c_str(), r.target.c_str(), r.passed ? "ok" : "FAIL", r.max_rel_error, r.entries, r.straddling,
                r.kink_margin, r.worst.c_str());
  }
  std::size_t failed = 0;
  for (const auto& r : rows) failed += r.passed ? 0 : 1;
  std::printf("%zu/%zu targets passed\n", rows.size() - failed, rows.size());
  return failed == 0 ? kOk : kCheckFailed;
}

int cmd_verify_lemma(std::size_t samples, std::uint64_t seed) {
  Rng rng(seed);
  const raster::Lemma2Report rep = raster::verify_lemma2(samples, rng);
  std::printf("singular values: %zu samples, max deviation %.3e\n", rep.samples, rep.max_singular_deviation);
  std::printf("norm bound: min ||D V D^T|| / ||V|| = %.6f (need >= 0.5)\n", rep.min_bound_ratio);
  if (!rep.passed) std::printf("failure: %s (a=%.6f, b=%.6f)\n", rep.failure.c_str(), rep.worst_a, rep.worst_b);
  bool ok = rep.passed;
  for (std::size_t w : {4, 16, 64}) {
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      // A random cell and an interior offset, away from the weight kinks.
      std::array<double, 2> k{};
      for (double& v : k) {
        const auto cell = static_cast<double>(rng() % w);
        v = (cell + uniform(rng, 0.1, 0.9)) / static_cast<double>(w);
      }
      worst = std::max(worst, raster::key_jacobian_check(k, w));
    }
    const bool pass = worst < 1e-6;
    ok = ok && pass;
    std::printf("jacobian w=%-3zu max |w*D - fd| = %.3e %s\n", w, worst, pass ? "ok" : "FAIL");
  }
  std::printf("%s\n", ok ? "lemma verified" : "lemma check FAILED");
  return ok ? kOk : kCheckFailed;
}

bool print_depth(const experiments::DepthReport& r, bool balancing) {
  std::printf("balancing %s\n  layer  key_grad_rms  ratio\n", balancing ? "on" : "off");
  for (const auto& row : r.rows) {
    if (row.layer + 1 < r.rows.size()) {
      std::printf("  %5zu  %12.4e  %6.3f\n", row.layer, row.key_grad_rms, row.ratio);
    } else {
      std::printf("  %5zu  %12.4e  -\n", row.layer, row.key_grad_rms);
    }
  }
  std::printf("  per-layer ratio [%.3f, %.3f], cumulative %.4e\n", r.min_ratio, r.max_ratio, r.cumulative);
  const bool ok = balancing ? (r.min_ratio >= 0.2 && r.max_ratio <= 5.0) : r.cumulative > 1e3;
  std::printf("  expectation (%s): %s\n", balancing ? "ratios within [0.2, 5]" : "cumulative > 1e3",
              ok ? "met" : "NOT met");
  return ok;
}

int cmd_depth(experiments::DepthOptions o, const std::string& mode) {
  bool ok = true;
  if (mode == "on" || mode == "both") {
    o.balancing = true;
    ok = print_depth(experiments::run_depth_stability(o), true) && ok;
  }
  if (mode == "off" || mode == "both") {
    o.balancing = false;
    ok = print_depth(experiments::run_depth_stability(o), false) && ok;
  }
  return ok ? kOk : kCheckFailed;
}

int cmd_train(const ConfigFlags& flags, std::uint64_t seed, const std::string& out_dir) {
  TrainConfig cfg = flags.build();
  cfg.seed = seed;
  cfg.seed_set = true;
  cfg.out_dir = out_dir;
  cfg.validate();
  try {
    const TrainResult r = run_training(cfg);
    std::printf("trained %s for %zu iterations, final loss %.6f\n", to_string(cfg.task).c_str(), r.iterations,
                r.final_loss);
    print_metrics(r.metrics);
    std::printf("wrote %s\n", r.out_dir.string().c_str());
  } catch (const TrainingDiverged& e) {
    std::fprintf(stderr, "error: %s\n  gradient dump: %s\n", e.what(), e.dump().string().c_str());
    return kCheckFailed;
  }
  return kOk;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw UsageError("--seeds: '" + item + "' is not an unsigned integer");
    }
  }
  if (seeds.empty()) throw UsageError("--seeds: no seeds given");
  return seeds;
}

int cmd_ablate(const ConfigFlags& flags, const std::string& suite, const std::string& seeds_text,
               const std::string& out_dir, std::string metric) {
  TrainConfig base = flags.build();
  base.out_dir = out_dir;
  base.seed_set = true;
  base.validate();
  if (metric.empty()) {
    switch (base.task) {
      case Task::segment: metric = "test/accuracy"; break;
      case Task::classify: metric = "test/class_accuracy"; break;
      default: throw UsageError("ablate: --metric is required for " + to_string(base.task));
    }
  }
  const auto rows = experiments::run_ablation(suite, base, parse_seeds(seeds_text), metric);
  std::printf("suite %s, metric %s\n", suite.c_str(), metric.c_str());
  for (const auto& r : rows) {
    std::printf("  %-22s mean %.6f  seeds", r.variant.c_str(), r.mean);
    for (double v : r.per_seed) std::printf(" %.6f", v);
    std::printf("\n");
  }
  return kOk;
}

int cmd_eval(const std::string& checkpoint) {
  TrainConfig cfg;
  cfg.apply(KeyValueConfig::parse(io::read_checkpoint_config(checkpoint), checkpoint));
  print_metrics(run_evaluation(cfg, checkpoint));
  return kOk;
}

int cmd_gen_data(const std::string& task, std::size_t count, std::uint64_t seed, const std::string& out_dir,
                 std::size_t points) {
  const Task t = parse_task(task);
  if (t != Task::segment && t != Task::classify) throw UsageError("gen-data: only seg and cls clouds are exported");
  fs::create_directories(out_dir);
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    synth::Sample s;
    if (t == Task::segment) {
      synth::TwoSurfaceParams p;
      p.points = points;
      s = synth::two_surface(p, rng);
    } else {
      synth::PrimitiveParams p;
      p.points = points;
      s = synth::primitive_cloud(p, rng);
    }
    io::PointCloudFile f;
    f.n = static_cast<std::uint32_t>(s.points());
    f.f = static_cast<std::uint32_t>(s.feature_dim);
    for (std::size_t p = 0; p < s.points(); ++p) {
      f.rows.insert(f.rows.end(), s.positions.begin() + static_cast<std::ptrdiff_t>(3 * p),
                    s.positions.begin() + static_cast<std::ptrdiff_t>(3 * p + 3));
      f.rows.insert(f.rows.end(), s.features.begin() + static_cast<std::ptrdiff_t>(s.feature_dim * p),
                    s.features.begin() + static_cast<std::ptrdiff_t>(s.feature_dim * (p + 1)));
    }
    // Segmentation clouds carry point labels, classification clouds the
    // foreground mask.
    const std::vector<int>& labels = t == Task::segment ? s.labels : s.fg_mask;
    f.labels.assign(labels.begin(), labels.end());
    char name[32];
    std::snprintf(name, sizeof name, "%s_%04zu.ctpc", task.c_str(), i);
    io::write_point_cloud(fs::path(out_dir) / name, f);
  }
  std::printf("wrote %zu clouds to %s\n", count, out_dir.c_str());
  return kOk;
}

int cmd_check_metrics(const std::string& path) {
  const io::MetricsCheck c = io::verify_metrics(path);
  if (c.complete) {
    std::printf("%s: complete, %zu rows\n", path.c_str(), c.rows);
    return kOk;
  }
  std::printf("%s: INCOMPLETE (%s)\n", path.c_str(), c.error.c_str());
  return kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cloud transform toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string out_dir;

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  std::string scope = "all", target;
  double step = 1e-5, tolerance = 1e-4;
  grad->add_option("--scope", scope, "op, block, model or all")->check(CLI::IsMember({"op", "block", "model", "all"}));
  grad->add_option("--target", target, "run a single named target");
  grad->add_option("--seed", seed, "first sample seed");
  grad->add_option("--step", step, "central difference step");
  grad->add_option("--tolerance", tolerance, "max relative error");

  auto* lemma = app.add_subcommand("verify-lemma", "bilinear Jacobian spectrum and norm bound");
  std::size_t samples = 1000;
  lemma->add_option("--samples", samples, "random (a, b) pairs and PSD matrices")->check(CLI::PositiveNumber);
  lemma->add_option("--seed", seed);

  auto* depth = app.add_subcommand("depth-stability", "key-gradient growth through a chain of cloud transforms");
  experiments::DepthOptions dopt;
  std::string balancing = "both";
  depth->add_option("--depth", dopt.depth, "chain length")->check(CLI::PositiveNumber);
  depth->add_option("--w", dopt.w, "grid size")->check(CLI::Range(2, 256));
  depth->add_option("--balancing", balancing, "on, off or both")->check(CLI::IsMember({"on", "off", "both"}));
  depth->add_option("--points", dopt.points)->check(CLI::PositiveNumber);
  depth->add_option("--g", dopt.g, "feature width")->check(CLI::PositiveNumber);
  depth->add_option("--channels", dopt.channels, "grid channels per head")->check(CLI::PositiveNumber);
  depth->add_option("--seed", dopt.seed);

  auto* train = app.add_subcommand("train", "train one task on its synthetic data");
  ConfigFlags train_flags;
  train->add_option("--task", train_flags.task, "seg, cls, gen or inpaint")
      ->required()
      ->check(CLI::IsMember({"seg", "cls", "gen", "inpaint", "segment", "classify", "generate"}));
  train->add_option("--seed", seed)->required();
  train->add_option("--out-dir", out_dir)->required();
  train_flags.add_to(train);

  auto* ablate = app.add_subcommand("ablate", "train every variant of an ablation suite");
  ConfigFlags ablate_flags;
  std::string suite, seeds_text = "1,2,3", metric;
  ablate->add_option("--suite", suite)->required()->check(CLI::IsMember({"aggregation", "keys", "heads", "depth"}));
  ablate->add_option("--task", ablate_flags.task, "seg, cls, gen or inpaint");
  ablate->add_option("--seeds", seeds_text, "comma separated");
  ablate->add_option("--out-dir", out_dir)->required();
  ablate->add_option("--metric", metric, "final metric key, e.g. test/accuracy");
  ablate_flags.add_to(ablate);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the synthetic test split");
  std::string checkpoint;
  eval->add_option("checkpoint", checkpoint, "checkpoint.ctck written by train")->required()->check(CLI::ExistingFile);

  auto* gen = app.add_subcommand("gen-data", "write synthetic clouds as CTPC files");
  std::string gen_task = "seg";
  std::size_t count = 8, points = 1024;
  gen->add_option("--task", gen_task, "seg or cls")->check(CLI::IsMember({"seg", "cls"}));
  gen->add_option("--count", count)->check(CLI::PositiveNumber);
  gen->add_option("--points", points)->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed);
  gen->add_option("--out-dir", out_dir)->required();

  auto* check = app.add_subcommand("check-metrics", "verify the checksum line of a metrics file");
  std::string metrics_path;
  check->add_option("file", metrics_path)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*grad) return cmd_gradcheck(scope, target, seed, step, tolerance);
    if (*lemma) return cmd_verify_lemma(samples, seed);
    if (*depth) return cmd_depth(dopt, balancing);
    if (*train) return cmd_train(train_flags, seed, out_dir);
    if (*ablate) return cmd_ablate(ablate_flags, suite, seeds_text, out_dir, metric);
    if (*eval) return cmd_eval(checkpoint);
    if (*gen) return cmd_gen_data(gen_task, count, seed, out_dir, points);
    if (*check) return cmd_check_metrics(metrics_path);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kCheckFailed;
  }
  return kUsage;
}
