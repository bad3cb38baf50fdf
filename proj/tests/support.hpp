#pragma once

// Test-only oracles. Nothing here calls into the library's own gradient
// checker, so the two can disagree.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "cloudtf/parameters.hpp"
#include "cloudtf/tensor.hpp"

namespace cloudtf::testing {

inline Tensor filled(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0, bool requires_grad = false) {
  Tensor t(std::move(shape), requires_grad);
  for (double& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

/// Central differences of a scalar function of `x`'s entries.
inline std::vector<double> numeric_grad(const std::function<double()>& f, Tensor x, double h = 1e-5) {
  std::vector<double> g(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + h;
    const double up = f();
    v[i] = keep - h;
    const double down = f();
    v[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_rel_error(std::span<const double> a, const std::vector<double>& b, double floor = 1e-4) {
  double worst = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double d = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / d);
  }
  return worst;
}

/// Runs backward on loss() and compares the gradient of every tensor in
/// `inputs` with central differences. Returns the largest relative error.
inline double fd_check(const std::function<Tensor()>& loss, std::vector<Tensor> inputs, double h = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  backward(loss());
  auto value = [&] {
    NoGradGuard g;
    return loss().item();
  };
  double worst = 0.0;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    worst = std::max(worst, max_rel_error(analytic, numeric_grad(value, t, h)));
  }
  return worst;
}

inline std::vector<double> to_vector(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace cloudtf::testing
