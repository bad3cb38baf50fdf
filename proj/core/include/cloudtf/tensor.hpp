#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cloudtf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}

/// Dense row-major array of doubles that can take part in reverse-mode
/// differentiation. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// True when no recorded node produced this tensor in the current tape epoch.
  bool is_leaf() const;

  /// Deep copy of the values, cut from any graph.
  Tensor clone() const;
  /// Shares nothing with the graph: same values, requires_grad = false.
  Tensor detach() const { return clone(); }

  const void* id() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
  friend class Tape;
};

/// Maps the output cotangent to one cotangent per input. An empty vector
/// means "no gradient for that input".
using BackwardFn =
    std::function<std::vector<std::vector<double>>(std::span<const double>)>;
using ForwardFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Define-by-run tape. One per thread; cleared after every backward().
class Tape {
 public:
  static Tape& active();

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t epoch() const { return epoch_; }
  void clear();

  /// Records `output` as produced by `inputs` when grad mode is on and some
  /// input requires grad. Returns `output` (marked requires_grad if recorded).
  Tensor record(std::string_view name, Tensor output,
                const std::vector<Tensor>& inputs, BackwardFn backward);

  void backward(const Tensor& loss);

  std::vector<std::string> node_names() const;

 private:
  struct Node {
    std::string name;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::uint64_t epoch_ = 1;
};

void backward(const Tensor& loss);

/// Installs a user-defined differentiable node. forward runs without
/// recording; the result is attached to the tape with `backward`.
Tensor custom_node(std::string_view name, const std::vector<Tensor>& inputs,
                   const ForwardFn& forward, BackwardFn backward);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Collects the smallest distance to a non-differentiable point (relu kink,
/// max tie, cell boundary) reported by ops while the scope is alive.
class KinkScope {
 public:
  KinkScope();
  ~KinkScope();
  KinkScope(const KinkScope&) = delete;
  KinkScope& operator=(const KinkScope&) = delete;
  double min_margin() const { return margin_; }
  /// Hash of every discrete choice (relu masks, max winners, grid cells,
  /// matchings) made while the scope was alive. Two evaluations with equal
  /// signatures lie on the same smooth piece.
  std::uint64_t signature() const { return signature_; }

 private:
  friend void report_kink_margin(double);
  friend void report_kink_choices(const void*, std::size_t);
  KinkScope* previous_;
  double margin_;
  std::uint64_t signature_;
};

void report_kink_margin(double margin);
void report_kink_choices(const void* data, std::size_t bytes);
template <typename T>
void report_kink_choices(const std::vector<T>& choices) {
  report_kink_choices(choices.data(), choices.size() * sizeof(T));
}
bool kink_tracking();

}  // namespace cloudtf
