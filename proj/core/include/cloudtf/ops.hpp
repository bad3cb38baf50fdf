#pragma once

#include <optional>
#include <string_view>
#include <vector>

#include "cloudtf/tensor.hpp"

namespace cloudtf {

// Element-wise binary ops accept `b` either with the same shape as `a` or with
// a shape equal to a trailing suffix of `a`'s shape (row broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[..., d_in] * W[d_in, d_out] + b[d_out]; `b` may be undefined.
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Global maximum; ties go to the lowest linear index.
Tensor max_reduce(const Tensor& x);
/// Maximum along `axis` (removed from the shape).
Tensor max_reduce(const Tensor& x, std::size_t axis);
Tensor sum_axis(const Tensor& x, std::size_t axis);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
/// Inserts a new axis at `axis` and repeats `x` `count` times along it.
Tensor repeat_axis(const Tensor& x, std::size_t axis, std::size_t count);

enum class OpKind {
  add, sub, mul, matmul, affine, relu, sigmoid, tanh, exp, sum, mean,
  max_reduce, reshape, concat, slice, repeat
};

struct OpAttrs {
  std::optional<std::size_t> axis;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t count = 0;
  Shape shape;
};

std::string_view op_name(OpKind kind);
Tensor forward_op(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

}  // namespace cloudtf
