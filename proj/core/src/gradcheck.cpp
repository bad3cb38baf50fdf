#include "cloudtf/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace cloudtf {

namespace {

struct Probe {
  double value;
  std::uint64_t signature;
};

Probe eval(const std::function<Tensor()>& loss) {
  NoGradGuard guard;
  KinkScope kinks;
  const double v = loss().item();
  return {v, kinks.signature()};
}

std::vector<std::size_t> pick_entries(std::size_t n, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (limit == 0 || limit >= n) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradcheckResult gradcheck(const std::function<Tensor()>& loss, const std::vector<NamedTensor>& inputs,
                          const GradcheckOptions& options) {
  GradcheckResult result;
  std::vector<Tensor> probed;
  for (const auto& in : inputs) {
    Tensor t = in.tensor;
    t.set_requires_grad(true);
    t.zero_grad();
    probed.push_back(t);
  }

  std::uint64_t base_signature;
  {
    KinkScope kinks;
    Tensor l = loss();
    base_signature = kinks.signature();
    result.kink_margin = kinks.min_margin();
    backward(l);
  }

  Rng rng(options.seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor t = probed[i];
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto values = t.data();
    for (std::size_t e : pick_entries(t.numel(), options.max_entries_per_tensor, rng)) {
      const double saved = values[e];
      values[e] = saved + options.step;
      const Probe up = eval(loss);
      values[e] = saved - options.step;
      const Probe down = eval(loss);
      values[e] = saved;
      if (up.signature != base_signature || down.signature != base_signature) {
        ++result.straddling;
        continue;
      }
      const double numeric = (up.value - down.value) / (2.0 * options.step);
      const double a = analytic[e];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.entries;
      if (!(rel <= result.max_rel_error)) {
        result.max_rel_error = rel;
        result.worst = {inputs[i].name, e, a, numeric, rel};
      }
    }
  }
  result.passed = result.entries > 0 && std::isfinite(result.max_rel_error) && result.max_rel_error < options.tolerance;
  return result;
}

ResampledResult gradcheck_resampled(const std::function<GradcheckProblem(std::uint64_t seed)>& build,
                                    std::uint64_t first_seed, const GradcheckOptions& options, double min_margin,
                                    std::size_t attempts) {
  if (attempts == 0) throw std::invalid_argument("gradcheck_resampled: attempts must be >= 1");
  // Take the first seed whose base point clears the margin, else the seed
  // with the widest margin.
  std::uint64_t best_seed = first_seed;
  double best_margin = -1.0;
  std::size_t used = 0;
  for (std::size_t a = 0; a < attempts; ++a) {
    const std::uint64_t seed = first_seed + a;
    GradcheckProblem problem = build(seed);
    double margin;
    {
      NoGradGuard guard;
      KinkScope kinks;
      problem.loss();
      margin = kinks.min_margin();
    }
    used = a + 1;
    if (margin > best_margin) {
      best_margin = margin;
      best_seed = seed;
    }
    if (margin >= min_margin) break;
  }
  GradcheckProblem problem = build(best_seed);
  ResampledResult out;
  out.result = gradcheck(problem.loss, problem.inputs, options);
  out.attempts = used;
  out.seed = best_seed;
  return out;
}

}  // namespace cloudtf
