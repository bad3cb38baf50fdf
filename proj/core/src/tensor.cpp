#include "cloudtf/tensor.hpp"

#include <algorithm>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace cloudtf {

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t producer_epoch = 0;  // 0: leaf
};
}  // namespace detail

namespace {
thread_local bool t_grad_enabled = true;
thread_local KinkScope* t_kink_scope = nullptr;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto d : shape)
    if (d == 0) throw std::invalid_argument("tensor extents must be positive: " + shape_str(shape));
  impl_->data.assign(shape_numel(shape), 0.0);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto d : shape)
    if (d == 0) throw std::invalid_argument("tensor extents must be positive: " + shape_str(shape));
  if (values.size() != shape_numel(shape)) {
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                " values do not fill shape " + shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::size(std::size_t axis) const { return impl_->shape.at(axis); }
std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<double> Tensor::data() { return impl_->data; }
std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }
std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}
void Tensor::zero_grad() { impl_->grad.clear(); }

bool Tensor::is_leaf() const {
  return impl_->producer_epoch == 0 || impl_->producer_epoch != Tape::active().epoch();
}

Tensor Tensor::clone() const {
  Tensor out;
  if (!impl_) return out;
  out.impl_ = std::make_shared<detail::TensorImpl>();
  out.impl_->shape = impl_->shape;
  out.impl_->data = impl_->data;
  return out;
}

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

void Tape::clear() {
  nodes_.clear();
  ++epoch_;
}

Tensor Tape::record(std::string_view name, Tensor output, const std::vector<Tensor>& inputs,
                    BackwardFn backward) {
  if (!t_grad_enabled) return output;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return output;
  output.impl_->requires_grad = true;
  output.impl_->producer_epoch = epoch_;
  nodes_.push_back(Node{std::string(name), inputs, output, std::move(backward)});
  return output;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar-shaped, got " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss does not depend on any tensor requiring grad");
  }
  Tensor root = loss;
  root.mutable_grad()[0] += 1.0;

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = *it;
    if (!node.output.has_grad()) continue;
    auto cotangents = node.backward(node.output.grad());
    if (cotangents.size() != node.inputs.size()) {
      throw std::runtime_error("node '" + node.name + "': backward returned " +
                               std::to_string(cotangents.size()) + " cotangents for " +
                               std::to_string(node.inputs.size()) + " inputs");
    }
    for (std::size_t i = 0; i < cotangents.size(); ++i) {
      auto& ct = cotangents[i];
      if (ct.empty()) continue;
      Tensor& in = node.inputs[i];
      if (ct.size() != in.numel()) {
        throw std::runtime_error("node '" + node.name + "': cotangent for input " +
                                 std::to_string(i) + " has " + std::to_string(ct.size()) +
                                 " entries, expected " + std::to_string(in.numel()) + " for shape " +
                                 shape_str(in.shape()));
      }
      if (!in.requires_grad()) continue;
      auto g = in.mutable_grad();
      for (std::size_t k = 0; k < ct.size(); ++k) g[k] += ct[k];
    }
  }
  clear();
}

std::vector<std::string> Tape::node_names() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const auto& n : nodes_) names.push_back(n.name);
  return names;
}

void backward(const Tensor& loss) { Tape::active().backward(loss); }

Tensor custom_node(std::string_view name, const std::vector<Tensor>& inputs,
                   const ForwardFn& forward, BackwardFn backward) {
  Tensor out;
  {
    NoGradGuard guard;
    out = forward(inputs);
  }
  if (!out.defined()) throw std::runtime_error("custom_node '" + std::string(name) + "': forward returned nothing");
  return Tape::active().record(name, out, inputs, std::move(backward));
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

KinkScope::KinkScope()
    : previous_(t_kink_scope), margin_(std::numeric_limits<double>::infinity()), signature_(1469598103934665603ull) {
  t_kink_scope = this;
}
KinkScope::~KinkScope() { t_kink_scope = previous_; }

void report_kink_margin(double margin) {
  for (KinkScope* s = t_kink_scope; s != nullptr; s = s->previous_) s->margin_ = std::min(s->margin_, margin);
}

void report_kink_choices(const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (KinkScope* s = t_kink_scope; s != nullptr; s = s->previous_) {
    std::uint64_t h = s->signature_;
    for (std::size_t i = 0; i < bytes; ++i) h = (h ^ p[i]) * 1099511628211ull;
    s->signature_ = h;
  }
}

bool kink_tracking() { return t_kink_scope != nullptr; }

}  // namespace cloudtf
