#include "cloudtf/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace cloudtf {

Adam::Adam(const ParameterSet& params, AdamOptions options) : options_(options) {
  if (!(options.lr > 0.0)) throw std::invalid_argument("Adam: lr must be > 0");
  for (const auto& p : params.items()) {
    if (!p.trainable) continue;
    slots_.push_back({p, std::vector<double>(p.tensor.numel(), 0.0), std::vector<double>(p.tensor.numel(), 0.0)});
  }
}

void Adam::step(double lr) {
  for (const auto& s : slots_) {
    if (!s.param.tensor.has_grad()) continue;
    for (double g : s.param.tensor.grad()) {
      if (!std::isfinite(g)) throw std::runtime_error("Adam: non-finite gradient in parameter '" + s.param.name + "'");
    }
  }
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (auto& s : slots_) {
    Tensor t = s.param.tensor;
    if (!t.has_grad()) continue;
    auto g = t.grad();
    auto x = t.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
      s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = s.m[i] / c1;
      const double vhat = s.v[i] / c2;
      x[i] -= lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& s : slots_) s.param.tensor.zero_grad();
}

double step_decay_lr(double base_lr, double factor, std::size_t interval, std::size_t iter) {
  if (interval == 0) throw std::invalid_argument("step_decay_lr: interval must be >= 1");
  return base_lr * std::pow(factor, static_cast<double>(iter / interval));
}

}  // namespace cloudtf
