#include "cloudtf/parameters.hpp"

#include <cmath>
#include <stdexcept>

namespace cloudtf {

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t(std::move(shape), true);
  for (double& v : t.data()) v = uniform(rng, -s, s);
  return t;
}

std::vector<double> random_rotation(Rng& rng) {
  // Normalized Gaussian quaternion is uniform on SO(3).
  double q[4];
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& c : q) {
      c = normal(rng);
      norm += c * c;
    }
  } while (norm < 1e-12);
  norm = std::sqrt(norm);
  for (double& c : q) c /= norm;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  return {1 - 2 * (y * y + z * z), 2 * (x * y - z * w),     2 * (x * z + y * w),
          2 * (x * y + z * w),     1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
          2 * (x * z - y * w),     2 * (y * z + x * w),     1 - 2 * (x * x + y * y)};
}

void ParameterSet::add(std::string name, Tensor tensor, bool trainable) {
  if (find(name) != nullptr) throw std::logic_error("duplicate parameter name: " + name);
  items_.push_back(NamedTensor{std::move(name), std::move(tensor), trainable});
}

const NamedTensor* ParameterSet::find(const std::string& name) const {
  for (const auto& item : items_)
    if (item.name == name) return &item;
  return nullptr;
}

std::size_t ParameterSet::scalar_count(bool trainable_only) const {
  std::size_t n = 0;
  for (const auto& item : items_)
    if (item.trainable || !trainable_only) n += item.tensor.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& item : items_) item.tensor.zero_grad();
}

}  // namespace cloudtf
