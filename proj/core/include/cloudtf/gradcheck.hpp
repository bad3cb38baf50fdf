#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cloudtf/parameters.hpp"
#include "cloudtf/tensor.hpp"

namespace cloudtf {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-4;
  /// Entries probed per tensor; 0 probes every entry.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 1;
};

struct GradcheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckResult {
  /// Entries compared against finite differences.
  std::size_t entries = 0;
  /// Entries left out because a probe at +-step changed a discrete choice
  /// (relu mask, max winner, grid cell, matching) of the base point.
  std::size_t straddling = 0;
  double max_rel_error = 0.0;
  GradcheckEntry worst;
  /// Smallest distance to a kink seen during the base forward pass.
  double kink_margin = 0.0;
  bool passed = false;
};

/// Compares backward() gradients of `loss` with central finite differences for
/// every (or a sampled subset of every) tensor in `inputs`. `loss` must be a
/// deterministic function of the tensors' current values. Passing needs at
/// least one compared entry and every compared error below tolerance.
GradcheckResult gradcheck(const std::function<Tensor()>& loss, const std::vector<NamedTensor>& inputs,
                          const GradcheckOptions& options = {});

struct GradcheckProblem {
  std::function<Tensor()> loss;
  std::vector<NamedTensor> inputs;
};

struct ResampledResult {
  GradcheckResult result;
  std::size_t attempts = 0;
  std::uint64_t seed = 0;
};

/// Rebuilds the problem with successive seeds until the base point keeps every
/// kink at least `min_margin` away (up to `attempts` tries; otherwise the seed
/// with the widest margin is used), then runs gradcheck. `build` returns the
/// loss closure and the tensors to probe.
ResampledResult gradcheck_resampled(const std::function<GradcheckProblem(std::uint64_t seed)>& build,
                                    std::uint64_t first_seed, const GradcheckOptions& options = {},
                                    double min_margin = 1e-3, std::size_t attempts = 10);

}  // namespace cloudtf
