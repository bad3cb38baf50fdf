#include "cloudtf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace cloudtf {

namespace {

[[noreturn]] void shape_error(std::string_view op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

// Number of times `b` repeats inside `a` under the suffix-broadcast rule.
std::size_t broadcast_repeats(std::string_view op, const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) {
    shape_error(op, "shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  }
  return a.numel() / b.numel();
}

template <typename F, typename DA, typename DB>
Tensor binary(std::string_view name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const std::size_t reps = broadcast_repeats(name, a, b);
  const std::size_t nb = b.numel();
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t j = 0; j < nb; ++j) o[r * nb + j] = f(x[r * nb + j], y[j]);
  return Tape::active().record(name, out, {a, b}, [a, b, reps, nb, da, db](std::span<const double> g) {
    auto x = a.data();
    auto y = b.data();
    std::vector<double> ga, gb;
    if (a.requires_grad()) {
      ga.resize(a.numel());
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < nb; ++j) ga[r * nb + j] = g[r * nb + j] * da(x[r * nb + j], y[j]);
    }
    if (b.requires_grad()) {
      gb.assign(nb, 0.0);
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < nb; ++j) gb[j] += g[r * nb + j] * db(x[r * nb + j], y[j]);
    }
    return std::vector<std::vector<double>>{std::move(ga), std::move(gb)};
  });
}

template <typename F, typename D>
Tensor unary(std::string_view name, const Tensor& x, F f, D d) {
  Tensor out(x.shape());
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
  return Tape::active().record(name, out, {x}, [x, out, d](std::span<const double> g) {
    auto in = x.data();
    auto o = out.data();
    std::vector<double> gx(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) gx[i] = g[i] * d(in[i], o[i]);
    return std::vector<std::vector<double>>{std::move(gx)};
  });
}

// Splits `shape` around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(0)) {
    shape_error("matmul", "shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  return affine(a, b, Tensor{});
}

Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.shape().back() != weight.size(0)) {
    shape_error("affine", "shape mismatch x" + shape_str(x.shape()) + " W" + shape_str(weight.shape()));
  }
  const std::size_t din = weight.size(0);
  const std::size_t dout = weight.size(1);
  if (bias.defined() && (bias.numel() != dout)) {
    shape_error("affine", "bias " + shape_str(bias.shape()) + " does not match W" + shape_str(weight.shape()));
  }
  const std::size_t rows = x.numel() / din;
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor out(out_shape);
  auto o = out.data();
  auto in = x.data();
  auto w = weight.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* orow = o.data() + r * dout;
    if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), orow);
    const double* irow = in.data() + r * din;
    for (std::size_t k = 0; k < din; ++k) {
      const double v = irow[k];
      const double* wrow = w.data() + k * dout;
      for (std::size_t j = 0; j < dout; ++j) orow[j] += v * wrow[j];
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return Tape::active().record(
      "affine", out, inputs, [x, weight, has_bias, rows, din, dout](std::span<const double> g) {
        std::vector<std::vector<double>> grads(has_bias ? 3 : 2);
        auto in = x.data();
        auto w = weight.data();
        if (x.requires_grad()) {
          auto& gx = grads[0];
          gx.assign(rows * din, 0.0);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* grow = g.data() + r * dout;
            for (std::size_t k = 0; k < din; ++k) {
              const double* wrow = w.data() + k * dout;
              double acc = 0.0;
              for (std::size_t j = 0; j < dout; ++j) acc += grow[j] * wrow[j];
              gx[r * din + k] = acc;
            }
          }
        }
        if (weight.requires_grad()) {
          auto& gw = grads[1];
          gw.assign(din * dout, 0.0);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* grow = g.data() + r * dout;
            const double* irow = in.data() + r * din;
            for (std::size_t k = 0; k < din; ++k) {
              const double v = irow[k];
              double* gwrow = gw.data() + k * dout;
              for (std::size_t j = 0; j < dout; ++j) gwrow[j] += v * grow[j];
            }
          }
        }
        if (has_bias) {
          auto& gb = grads[2];
          gb.assign(dout, 0.0);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < dout; ++j) gb[j] += g[r * dout + j];
        }
        return grads;
      });
}

Tensor relu(const Tensor& x) {
  if (kink_tracking()) {
    double m = std::numeric_limits<double>::infinity();
    std::vector<char> mask;
    mask.reserve(x.numel());
    for (double v : x.data()) {
      m = std::min(m, std::abs(v));
      mask.push_back(v > 0.0);
    }
    report_kink_margin(m);
    report_kink_choices(mask);
  }
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  const std::size_t n = x.numel();
  return Tape::active().record("sum", out, {x}, [n](std::span<const double> g) {
    return std::vector<std::vector<double>>{std::vector<double>(n, g[0])};
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor max_reduce(const Tensor& x) {
  auto in = x.data();
  std::size_t best = 0;
  for (std::size_t i = 1; i < in.size(); ++i)
    if (in[i] > in[best]) best = i;
  if (kink_tracking() && in.size() > 1) {
    double second = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < in.size(); ++i)
      if (i != best) second = std::max(second, in[i]);
    report_kink_margin(in[best] - second);
    report_kink_choices(&best, sizeof best);
  }
  Tensor out = Tensor::scalar(in[best]);
  const std::size_t n = x.numel();
  return Tape::active().record("max_reduce", out, {x}, [n, best](std::span<const double> g) {
    std::vector<double> gx(n, 0.0);
    gx[best] = g[0];
    return std::vector<std::vector<double>>{std::move(gx)};
  });
}

Tensor max_reduce(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) shape_error("max_reduce", "axis out of range for " + shape_str(x.shape()));
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  Tensor out(out_shape);
  auto in = x.data();
  auto o = out.data();
  std::vector<std::size_t> winner(s.outer * s.inner);
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < s.outer; ++a) {
    for (std::size_t c = 0; c < s.inner; ++c) {
      std::size_t best = 0;
      for (std::size_t e = 1; e < s.extent; ++e)
        if (in[(a * s.extent + e) * s.inner + c] > in[(a * s.extent + best) * s.inner + c]) best = e;
      for (std::size_t e = 0; e < s.extent; ++e)
        if (e != best)
          margin = std::min(margin, in[(a * s.extent + best) * s.inner + c] - in[(a * s.extent + e) * s.inner + c]);
      winner[a * s.inner + c] = best;
      o[a * s.inner + c] = in[(a * s.extent + best) * s.inner + c];
    }
  }
  if (kink_tracking()) {
    report_kink_margin(margin);
    report_kink_choices(winner);
  }
  const std::size_t n = x.numel();
  return Tape::active().record("max_reduce", out, {x}, [n, s, winner](std::span<const double> g) {
    std::vector<double> gx(n, 0.0);
    for (std::size_t a = 0; a < s.outer; ++a)
      for (std::size_t c = 0; c < s.inner; ++c)
        gx[(a * s.extent + winner[a * s.inner + c]) * s.inner + c] += g[a * s.inner + c];
    return std::vector<std::vector<double>>{std::move(gx)};
  });
}

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) shape_error("sum_axis", "axis out of range for " + shape_str(x.shape()));
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  Tensor out(out_shape);
  auto in = x.data();
  auto o = out.data();
  for (std::size_t a = 0; a < s.outer; ++a)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t c = 0; c < s.inner; ++c) o[a * s.inner + c] += in[(a * s.extent + e) * s.inner + c];
  const std::size_t n = x.numel();
  return Tape::active().record("sum_axis", out, {x}, [n, s](std::span<const double> g) {
    std::vector<double> gx(n);
    for (std::size_t a = 0; a < s.outer; ++a)
      for (std::size_t e = 0; e < s.extent; ++e)
        for (std::size_t c = 0; c < s.inner; ++c) gx[(a * s.extent + e) * s.inner + c] = g[a * s.inner + c];
    return std::vector<std::vector<double>>{std::move(gx)};
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    shape_error("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  return Tape::active().record("reshape", out, {x}, [](std::span<const double> g) {
    return std::vector<std::vector<double>>{std::vector<double>(g.begin(), g.end())};
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) shape_error("concat", "axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) shape_error("concat", "shape mismatch " + shape_str(first) + " vs " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  const AxisSplit os = split_axis(out_shape, axis);
  Tensor out(out_shape);
  auto o = out.data();
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t ext = p.shape()[axis];
    auto in = p.data();
    for (std::size_t a = 0; a < os.outer; ++a)
      std::copy_n(in.data() + a * ext * os.inner, ext * os.inner, o.data() + (a * os.extent + offset) * os.inner);
    offset += ext;
  }
  return Tape::active().record("concat", out, parts, [parts, offsets, os, axis](std::span<const double> g) {
    std::vector<std::vector<double>> grads(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (!parts[i].requires_grad()) continue;
      const std::size_t ext = parts[i].shape()[axis];
      auto& gp = grads[i];
      gp.resize(parts[i].numel());
      for (std::size_t a = 0; a < os.outer; ++a)
        std::copy_n(g.data() + (a * os.extent + offsets[i]) * os.inner, ext * os.inner, gp.data() + a * ext * os.inner);
    }
    return grads;
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.size(axis)) {
    shape_error("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                             std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  const std::size_t ext = end - begin;
  Shape out_shape = x.shape();
  out_shape[axis] = ext;
  Tensor out(out_shape);
  auto in = x.data();
  auto o = out.data();
  for (std::size_t a = 0; a < s.outer; ++a)
    std::copy_n(in.data() + (a * s.extent + begin) * s.inner, ext * s.inner, o.data() + a * ext * s.inner);
  const std::size_t n = x.numel();
  return Tape::active().record("slice", out, {x}, [n, s, begin, ext](std::span<const double> g) {
    std::vector<double> gx(n, 0.0);
    for (std::size_t a = 0; a < s.outer; ++a)
      std::copy_n(g.data() + a * ext * s.inner, ext * s.inner, gx.data() + (a * s.extent + begin) * s.inner);
    return std::vector<std::vector<double>>{std::move(gx)};
  });
}

Tensor repeat_axis(const Tensor& x, std::size_t axis, std::size_t count) {
  if (axis > x.rank() || count == 0) shape_error("repeat", "invalid axis/count for " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), count);
  const AxisSplit s = split_axis(out_shape, axis);
  Tensor out(out_shape);
  auto in = x.data();
  auto o = out.data();
  for (std::size_t a = 0; a < s.outer; ++a)
    for (std::size_t e = 0; e < count; ++e)
      std::copy_n(in.data() + a * s.inner, s.inner, o.data() + (a * count + e) * s.inner);
  const std::size_t n = x.numel();
  return Tape::active().record("repeat", out, {x}, [n, s, count](std::span<const double> g) {
    std::vector<double> gx(n, 0.0);
    for (std::size_t a = 0; a < s.outer; ++a)
      for (std::size_t e = 0; e < count; ++e)
        for (std::size_t c = 0; c < s.inner; ++c) gx[a * s.inner + c] += g[(a * count + e) * s.inner + c];
    return std::vector<std::vector<double>>{std::move(gx)};
  });
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::affine: return "affine";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::tanh: return "tanh";
    case OpKind::exp: return "exp";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::max_reduce: return "max_reduce";
    case OpKind::reshape: return "reshape";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::repeat: return "repeat";
  }
  return "unknown";
}

Tensor forward_op(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() < n) {
      shape_error(op_name(kind), "expected " + std::to_string(n) + " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::add: need(2); return add(inputs[0], inputs[1]);
    case OpKind::sub: need(2); return sub(inputs[0], inputs[1]);
    case OpKind::mul: need(2); return mul(inputs[0], inputs[1]);
    case OpKind::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::affine:
      need(2);
      return affine(inputs[0], inputs[1], inputs.size() > 2 ? inputs[2] : Tensor{});
    case OpKind::relu: need(1); return relu(inputs[0]);
    case OpKind::sigmoid: need(1); return sigmoid(inputs[0]);
    case OpKind::tanh: need(1); return tanh(inputs[0]);
    case OpKind::exp: need(1); return exp(inputs[0]);
    case OpKind::sum: need(1); return sum(inputs[0]);
    case OpKind::mean: need(1); return mean(inputs[0]);
    case OpKind::max_reduce:
      need(1);
      return attrs.axis ? max_reduce(inputs[0], *attrs.axis) : max_reduce(inputs[0]);
    case OpKind::reshape: need(1); return reshape(inputs[0], attrs.shape);
    case OpKind::concat: need(1); return concat(inputs, attrs.axis.value_or(0));
    case OpKind::slice: need(1); return slice(inputs[0], attrs.axis.value_or(0), attrs.begin, attrs.end);
    case OpKind::repeat: need(1); return repeat_axis(inputs[0], attrs.axis.value_or(0), attrs.count);
  }
  shape_error("forward_op", "unknown op kind");
}

}  // namespace cloudtf
