#pragma once

#include <vector>

#include "cloudtf/parameters.hpp"

namespace cloudtf {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction over the trainable entries of a ParameterSet.
class Adam {
 public:
  Adam(const ParameterSet& params, AdamOptions options);

  /// One update using the current .grad of every trainable tensor; tensors
  /// that received no gradient this step are left alone. Throws
  /// std::runtime_error naming the parameter if a gradient is not finite; no
  /// tensor is modified in that case.
  void step(double lr);
  void step() { step(options_.lr); }
  void zero_grad();
  std::size_t steps() const { return t_; }
  const AdamOptions& options() const { return options_; }

 private:
  struct Slot {
    NamedTensor param;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  AdamOptions options_;
  std::size_t t_ = 0;
};

/// Step decay: lr * factor^(floor(iter / interval)).
double step_decay_lr(double base_lr, double factor, std::size_t interval, std::size_t iter);

}  // namespace cloudtf
