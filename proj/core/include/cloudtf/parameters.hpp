#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cloudtf/tensor.hpp"

namespace cloudtf {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi);
double normal(Rng& rng);

/// Tensor of uniform(-s, s) entries with s = 1 / sqrt(fan_in).
Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng);
/// Uniformly random proper rotation (det +1), row-major 3x3.
std::vector<double> random_rotation(Rng& rng);

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

/// Flat, ordered registry of a module tree's tensors. Buffers (running
/// statistics) are registered with trainable = false.
class ParameterSet {
 public:
  void add(std::string name, Tensor tensor, bool trainable = true);
  const std::vector<NamedTensor>& items() const { return items_; }
  std::vector<NamedTensor>& items() { return items_; }
  const NamedTensor* find(const std::string& name) const;
  std::size_t scalar_count(bool trainable_only = true) const;
  void zero_grad();

 private:
  std::vector<NamedTensor> items_;
};

class Module {
 public:
  virtual ~Module() = default;
  virtual void collect(ParameterSet& out, const std::string& prefix) const = 0;

  ParameterSet parameters() const {
    ParameterSet set;
    collect(set, "");
    return set;
  }
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace cloudtf
