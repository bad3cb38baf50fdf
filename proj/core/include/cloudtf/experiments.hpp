#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cloudtf/config.hpp"
#include "cloudtf/gradcheck.hpp"

namespace cloudtf::experiments {

enum class GradScope { op, block, model, all };
GradScope parse_grad_scope(const std::string& name);

struct GradcheckRow {
  std::string scope;
  std::string target;
  std::size_t entries = 0;
  std::size_t straddling = 0;
  std::size_t attempts = 0;
  double max_rel_error = 0.0;
  double kink_margin = 0.0;
  std::string worst;
  bool passed = false;
};

/// Names of the finite-difference targets in a scope, in run order.
std::vector<std::string> gradcheck_targets(GradScope scope);
GradcheckRow run_gradcheck_target(const std::string& target, std::uint64_t seed,
                                  const GradcheckOptions& options = {});
std::vector<GradcheckRow> run_gradcheck(GradScope scope, std::uint64_t seed, const GradcheckOptions& options = {});

struct DepthOptions {
  std::size_t depth = 8;
  std::size_t w = 16;
  bool balancing = true;
  std::size_t points = 128;
  std::size_t batch = 2;
  std::size_t g = 64;
  std::size_t channels = 16;
  std::uint64_t seed = 0;
};

struct DepthRow {
  std::size_t layer = 0;
  double key_grad_rms = 0.0;
  /// key_grad_rms of this layer over that of the next one (0 for the last).
  double ratio = 0.0;
};

struct DepthReport {
  std::vector<DepthRow> rows;
  double min_ratio = 0.0;
  double max_ratio = 0.0;
  /// First-layer over last-layer key gradient RMS.
  double cumulative = 1.0;
};

/// Chain of `depth` cloud-transform heads (each feeding the next one's
/// features), one backward pass from a random linear loss, and the RMS of
/// the key gradient of every layer.
DepthReport run_depth_stability(const DepthOptions& options);

struct AblationVariant {
  std::string name;
  std::vector<std::pair<std::string, std::string>> overrides;
};

struct AblationRow {
  std::string variant;
  std::vector<double> per_seed;
  double mean = 0.0;
};

/// Variants of a suite: aggregation, keys, heads, depth.
std::vector<AblationVariant> ablation_suite(const std::string& suite);
/// Trains every variant of `suite` from `base` for each seed and reports the
/// final value of `metric` (a "<split>/<name>" key), sorted by mean
/// descending (ties keep suite order).
std::vector<AblationRow> run_ablation(const std::string& suite, const TrainConfig& base,
                                      const std::vector<std::uint64_t>& seeds, const std::string& metric);

}  // namespace cloudtf::experiments
