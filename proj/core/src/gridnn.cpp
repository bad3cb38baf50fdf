#include "cloudtf/gridnn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "cloudtf/ops.hpp"

namespace cloudtf::nn {

namespace {

// Spatial layout of a 2D or 3D channel-last grid, 2D viewed as depth 1.
struct Geometry {
  std::size_t batch = 0, d = 1, h = 0, w = 0, c = 0;
  std::size_t kd = 1, kh = 1, kw = 1;
  std::size_t spatial() const { return d * h * w; }
};

Geometry grid_geometry(const char* op, const Tensor& grid, int dims) {
  if (grid.rank() != static_cast<std::size_t>(dims) + 2) {
    throw std::invalid_argument(std::string(op) + ": expected a " + std::to_string(dims) + "D grid, got " +
                                shape_str(grid.shape()));
  }
  Geometry g;
  g.batch = grid.size(0);
  if (dims == 3) {
    g.d = grid.size(1);
    g.h = grid.size(2);
    g.w = grid.size(3);
  } else {
    g.h = grid.size(1);
    g.w = grid.size(2);
  }
  g.c = grid.shape().back();
  return g;
}

}  // namespace

ConvParams ConvParams::init(int dims, std::size_t c_in, std::size_t c_out, std::size_t kernel, Rng& rng) {
  if (dims != 2 && dims != 3) throw std::invalid_argument("conv: dims must be 2 or 3");
  if (kernel % 2 == 0) throw std::invalid_argument("conv: kernel size must be odd");
  ConvParams p;
  p.dims = dims;
  p.kernel = kernel;
  p.c_in = c_in;
  p.c_out = c_out;
  std::size_t taps = 1;
  for (int a = 0; a < dims; ++a) taps *= kernel;
  p.weight = init_uniform({taps, c_in, c_out}, taps * c_in, rng);
  p.bias = init_uniform({c_out}, taps * c_in, rng);
  return p;
}

ConvParams ConvParams::identity(int dims, std::size_t channels, std::size_t kernel) {
  ConvParams p;
  p.dims = dims;
  p.kernel = kernel;
  p.c_in = channels;
  p.c_out = channels;
  std::size_t taps = 1;
  for (int a = 0; a < dims; ++a) taps *= kernel;
  p.weight = Tensor({taps, channels, channels}, true);
  p.bias = Tensor({channels}, true);
  const std::size_t center = taps / 2;
  for (std::size_t c = 0; c < channels; ++c) p.weight.data()[(center * channels + c) * channels + c] = 1.0;
  return p;
}

Tensor conv_same(const Tensor& grid, const ConvParams& p) {
  const Geometry g0 = grid_geometry("conv_same", grid, p.dims);
  if (g0.c != p.c_in) {
    throw std::invalid_argument("conv_same: grid has " + std::to_string(g0.c) + " channels, kernel expects " +
                                std::to_string(p.c_in));
  }
  Geometry g = g0;
  g.kd = p.dims == 3 ? p.kernel : 1;
  g.kh = p.kernel;
  g.kw = p.kernel;
  const std::size_t cin = p.c_in, cout = p.c_out;
  Shape out_shape = grid.shape();
  out_shape.back() = cout;
  Tensor out(out_shape);
  auto o = out.data();
  auto in = grid.data();
  auto wt = p.weight.data();
  auto bias = p.bias.data();

  // Visits every (output position, in-bounds input position, tap) triple.
  auto for_each_tap = [g](auto&& fn) {
    const auto rd = static_cast<std::ptrdiff_t>(g.kd / 2), rh = static_cast<std::ptrdiff_t>(g.kh / 2),
               rw = static_cast<std::ptrdiff_t>(g.kw / 2);
    const auto D = static_cast<std::ptrdiff_t>(g.d), H = static_cast<std::ptrdiff_t>(g.h),
               W = static_cast<std::ptrdiff_t>(g.w);
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::ptrdiff_t z = 0; z < D; ++z)
        for (std::ptrdiff_t y = 0; y < H; ++y)
          for (std::ptrdiff_t x = 0; x < W; ++x) {
            const std::size_t opos = b * g.spatial() + static_cast<std::size_t>((z * H + y) * W + x);
            std::size_t tap = 0;
            for (std::ptrdiff_t dz = -rd; dz <= rd; ++dz)
              for (std::ptrdiff_t dy = -rh; dy <= rh; ++dy)
                for (std::ptrdiff_t dx = -rw; dx <= rw; ++dx, ++tap) {
                  const std::ptrdiff_t zz = z + dz, yy = y + dy, xx = x + dx;
                  if (zz < 0 || zz >= D || yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                  const std::size_t ipos = b * g.spatial() + static_cast<std::size_t>((zz * H + yy) * W + xx);
                  fn(opos, ipos, tap);
                }
          }
    }
  };

  for (std::size_t pos = 0; pos < g.batch * g.spatial(); ++pos)
    std::copy(bias.begin(), bias.end(), o.begin() + static_cast<std::ptrdiff_t>(pos * cout));
  for_each_tap([&](std::size_t opos, std::size_t ipos, std::size_t tap) {
    const double* irow = in.data() + ipos * cin;
    double* orow = o.data() + opos * cout;
    const double* wtap = wt.data() + tap * cin * cout;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double a = irow[ci];
      if (a == 0.0) continue;
      const double* wrow = wtap + ci * cout;
      for (std::size_t co = 0; co < cout; ++co) orow[co] += a * wrow[co];
    }
  });

  return Tape::active().record(
      "conv_same", out, {grid, p.weight, p.bias},
      [grid, weight = p.weight, bias_t = p.bias, g, cin, cout, for_each_tap](std::span<const double> go) {
        auto in = grid.data();
        auto wt = weight.data();
        std::vector<double> gin, gw, gb;
        if (grid.requires_grad()) gin.assign(grid.numel(), 0.0);
        if (weight.requires_grad()) gw.assign(weight.numel(), 0.0);
        if (bias_t.requires_grad()) {
          gb.assign(cout, 0.0);
          for (std::size_t pos = 0; pos < g.batch * g.spatial(); ++pos)
            for (std::size_t co = 0; co < cout; ++co) gb[co] += go[pos * cout + co];
        }
        if (!gin.empty() || !gw.empty()) {
          for_each_tap([&](std::size_t opos, std::size_t ipos, std::size_t tap) {
            const double* grow = go.data() + opos * cout;
            const double* irow = in.data() + ipos * cin;
            const double* wtap = wt.data() + tap * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double* wrow = wtap + ci * cout;
              if (!gin.empty()) {
                double acc = 0.0;
                for (std::size_t co = 0; co < cout; ++co) acc += grow[co] * wrow[co];
                gin[ipos * cin + ci] += acc;
              }
              if (!gw.empty()) {
                const double a = irow[ci];
                if (a == 0.0) continue;
                double* gwrow = gw.data() + (tap * cin + ci) * cout;
                for (std::size_t co = 0; co < cout; ++co) gwrow[co] += a * grow[co];
              }
            }
          });
        }
        return std::vector<std::vector<double>>{std::move(gin), std::move(gw), std::move(gb)};
      });
}

std::string to_string(NormKind kind) {
  switch (kind) {
    case NormKind::batch: return "batch";
    case NormKind::instance: return "instance";
    case NormKind::adaptive_instance: return "adaptive-instance";
  }
  return "batch";
}

NormKind parse_norm_kind(const std::string& name) {
  if (name == "batch") return NormKind::batch;
  if (name == "instance") return NormKind::instance;
  if (name == "adaptive-instance" || name == "adain") return NormKind::adaptive_instance;
  throw std::invalid_argument("unknown norm kind '" + name + "' (expected batch|instance|adaptive-instance)");
}

NormParams NormParams::init(NormKind kind, std::size_t channels) {
  NormParams p;
  p.kind = kind;
  p.channels = channels;
  if (kind != NormKind::adaptive_instance) {
    p.scale = Tensor({channels}, std::vector<double>(channels, 1.0), true);
    p.shift = Tensor({channels}, true);
  }
  if (kind == NormKind::batch) {
    p.running_mean = Tensor({channels});
    p.running_var = Tensor({channels}, std::vector<double>(channels, 1.0));
  }
  return p;
}

Tensor normalize(const Tensor& x, NormParams& p, bool training, const Tensor& style) {
  if (x.rank() < 2 || x.shape().back() != p.channels) {
    throw std::invalid_argument("normalize: input " + shape_str(x.shape()) + " does not have " +
                                std::to_string(p.channels) + " channels");
  }
  const std::size_t c = p.channels;
  const std::size_t batch = x.size(0);
  const std::size_t per_sample = x.numel() / (batch * c);
  const bool adaptive = p.kind == NormKind::adaptive_instance;
  if (adaptive) {
    if (!style.defined()) throw std::invalid_argument("normalize: adaptive-instance kind requires a style input");
    if (style.rank() != 2 || style.size(0) != batch || style.size(1) != 2 * c) {
      throw std::invalid_argument("normalize: style " + shape_str(style.shape()) + " must be [" +
                                  std::to_string(batch) + ", " + std::to_string(2 * c) + "]");
    }
  }
  // Group g covers the entries normalized together.
  const bool per_channel = p.kind == NormKind::batch;
  const std::size_t groups = per_channel ? c : batch * c;
  const std::size_t group_size = per_channel ? batch * per_sample : per_sample;
  auto group_of = [&](std::size_t b, std::size_t ch) { return per_channel ? ch : b * c + ch; };

  auto in = x.data();
  std::vector<double> mu(groups, 0.0), var(groups, 0.0);
  const bool use_running = per_channel && !training;
  if (use_running) {
    std::copy(p.running_mean.data().begin(), p.running_mean.data().end(), mu.begin());
    std::copy(p.running_var.data().begin(), p.running_var.data().end(), var.begin());
  } else {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t m = 0; m < per_sample; ++m)
        for (std::size_t ch = 0; ch < c; ++ch) mu[group_of(b, ch)] += in[(b * per_sample + m) * c + ch];
    for (double& v : mu) v /= static_cast<double>(group_size);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t m = 0; m < per_sample; ++m)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double d = in[(b * per_sample + m) * c + ch] - mu[group_of(b, ch)];
          var[group_of(b, ch)] += d * d;
        }
    for (double& v : var) v /= static_cast<double>(group_size);
    if (per_channel && grad_enabled()) {
      auto rm = p.running_mean.data();
      auto rv = p.running_var.data();
      for (std::size_t ch = 0; ch < c; ++ch) {
        rm[ch] = p.momentum * rm[ch] + (1.0 - p.momentum) * mu[ch];
        rv[ch] = p.momentum * rv[ch] + (1.0 - p.momentum) * var[ch];
      }
    }
  }
  std::vector<double> inv_std(groups);
  for (std::size_t i = 0; i < groups; ++i) inv_std[i] = 1.0 / std::sqrt(var[i] + p.eps);

  Tensor xhat_t(x.shape());
  Tensor out(x.shape());
  auto xhat = xhat_t.data();
  auto o = out.data();
  auto sv = adaptive ? style.data() : std::span<const double>{};
  auto gamma = adaptive ? std::span<const double>{} : std::span<const double>(p.scale.data());
  auto beta = adaptive ? std::span<const double>{} : std::span<const double>(p.shift.data());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t m = 0; m < per_sample; ++m)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t i = (b * per_sample + m) * c + ch;
        const std::size_t gi = group_of(b, ch);
        xhat[i] = (in[i] - mu[gi]) * inv_std[gi];
        const double sc = adaptive ? sv[b * 2 * c + ch] : gamma[ch];
        const double sh = adaptive ? sv[b * 2 * c + c + ch] : beta[ch];
        o[i] = xhat[i] * sc + sh;
      }

  std::vector<Tensor> inputs{x};
  if (adaptive) {
    inputs.push_back(style);
  } else {
    inputs.push_back(p.scale);
    inputs.push_back(p.shift);
  }
  return Tape::active().record(
      "normalize", out, inputs,
      [inputs, xhat_t, inv_std, batch, per_sample, c, adaptive, per_channel, use_running, group_size,
       groups](std::span<const double> g) {
        auto xhat = xhat_t.data();
        auto group_of = [&](std::size_t b, std::size_t ch) { return per_channel ? ch : b * c + ch; };
        std::span<const double> sv = adaptive ? inputs[1].data() : std::span<const double>{};
        std::span<const double> gamma = adaptive ? std::span<const double>{} : inputs[1].data();
        std::vector<double> gx(inputs[0].numel());
        std::vector<double> dxhat(gx.size());
        std::vector<double> sum_d(groups, 0.0), sum_dx(groups, 0.0);
        std::vector<double> g_a, g_b;
        if (adaptive) {
          g_a.assign(batch * 2 * c, 0.0);
        } else {
          g_a.assign(c, 0.0);
          g_b.assign(c, 0.0);
        }
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t m = 0; m < per_sample; ++m)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t i = (b * per_sample + m) * c + ch;
              const double sc = adaptive ? sv[b * 2 * c + ch] : gamma[ch];
              dxhat[i] = g[i] * sc;
              sum_d[group_of(b, ch)] += dxhat[i];
              sum_dx[group_of(b, ch)] += dxhat[i] * xhat[i];
              if (adaptive) {
                g_a[b * 2 * c + ch] += g[i] * xhat[i];
                g_a[b * 2 * c + c + ch] += g[i];
              } else {
                g_a[ch] += g[i] * xhat[i];
                g_b[ch] += g[i];
              }
            }
        const double n = static_cast<double>(group_size);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t m = 0; m < per_sample; ++m)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t i = (b * per_sample + m) * c + ch;
              const std::size_t gi = group_of(b, ch);
              if (use_running) {
                gx[i] = dxhat[i] * inv_std[gi];
              } else {
                gx[i] = inv_std[gi] * (dxhat[i] - sum_d[gi] / n - xhat[i] * sum_dx[gi] / n);
              }
            }
        std::vector<std::vector<double>> grads;
        grads.push_back(std::move(gx));
        grads.push_back(std::move(g_a));
        if (!adaptive) grads.push_back(std::move(g_b));
        return grads;
      });
}

Tensor max_pool(const Tensor& grid) {
  const int dims = static_cast<int>(grid.rank()) - 2;
  if (dims != 2 && dims != 3) throw std::invalid_argument("max_pool: expected a 2D or 3D grid, got " + shape_str(grid.shape()));
  const Geometry g = grid_geometry("max_pool", grid, dims);
  const std::size_t od = dims == 3 ? g.d / 2 : 1, oh = g.h / 2, ow = g.w / 2;
  if (od == 0 || oh == 0 || ow == 0) throw std::invalid_argument("max_pool: grid " + shape_str(grid.shape()) + " too small");
  Shape out_shape = grid.shape();
  for (int a = 0; a < dims; ++a) out_shape[1 + static_cast<std::size_t>(a)] /= 2;
  Tensor out(out_shape);
  auto in = grid.data();
  auto o = out.data();
  const std::size_t c = g.c;
  const std::size_t kd = dims == 3 ? 2 : 1;
  std::vector<std::size_t> winner(out.numel());
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t oi = (((b * od + z) * oh + y) * ow + x) * c + ch;
            double best = -std::numeric_limits<double>::infinity(), second = best;
            std::size_t arg = 0;
            for (std::size_t dz = 0; dz < kd; ++dz)
              for (std::size_t dy = 0; dy < 2; ++dy)
                for (std::size_t dx = 0; dx < 2; ++dx) {
                  const std::size_t ii = (((b * g.d + z * kd + dz) * g.h + y * 2 + dy) * g.w + x * 2 + dx) * c + ch;
                  if (in[ii] > best) {
                    second = best;
                    best = in[ii];
                    arg = ii;
                  } else {
                    second = std::max(second, in[ii]);
                  }
                }
            o[oi] = best;
            winner[oi] = arg;
            // Windows of relu-clamped zeros stay tied under perturbation; their
            // kinks are reported by the relu itself.
            if (best != 0.0 || second != 0.0) margin = std::min(margin, best - second);
          }
  if (kink_tracking()) {
    report_kink_margin(margin);
    report_kink_choices(winner);
  }
  const std::size_t n = grid.numel();
  return Tape::active().record("max_pool", out, {grid}, [n, winner](std::span<const double> g) {
    std::vector<double> gx(n, 0.0);
    for (std::size_t i = 0; i < winner.size(); ++i) gx[winner[i]] += g[i];
    return std::vector<std::vector<double>>{std::move(gx)};
  });
}

Tensor avg_pool_global(const Tensor& grid) {
  if (grid.rank() < 3) throw std::invalid_argument("avg_pool_global: expected [B, spatial.., c], got " + shape_str(grid.shape()));
  const std::size_t batch = grid.size(0);
  const std::size_t c = grid.shape().back();
  const std::size_t spatial = grid.numel() / (batch * c);
  Tensor flat = reshape(grid, {batch, spatial, c});
  return scale(sum_axis(flat, 1), 1.0 / static_cast<double>(spatial));
}

Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) { return affine(x, weight, bias); }

Dense::Dense(std::size_t d_in, std::size_t d_out, Rng& rng, bool bias)
    : weight_(init_uniform({d_in, d_out}, d_in, rng)) {
  if (bias) bias_ = init_uniform({d_out}, d_in, rng);
}

Tensor Dense::forward(const Tensor& x) const { return affine(x, weight_, bias_); }

void Dense::collect(ParameterSet& out, const std::string& prefix) const {
  out.add(join_name(prefix, "weight"), weight_);
  if (bias_.defined()) out.add(join_name(prefix, "bias"), bias_);
}

Conv::Conv(int dims, std::size_t c_in, std::size_t c_out, std::size_t kernel, Rng& rng)
    : params_(ConvParams::init(dims, c_in, c_out, kernel, rng)) {}

void Conv::collect(ParameterSet& out, const std::string& prefix) const {
  out.add(join_name(prefix, "weight"), params_.weight);
  out.add(join_name(prefix, "bias"), params_.bias);
}

Norm::Norm(NormKind kind, std::size_t channels, std::size_t style_dim, Rng& rng)
    : params_(NormParams::init(kind, channels)) {
  if (kind == NormKind::adaptive_instance) {
    if (style_dim == 0) throw std::invalid_argument("adaptive-instance norm needs style_dim > 0");
    style_map_ = Dense(style_dim, 2 * channels, rng);
    // Small style weights around an identity affine: scale 1, shift 0.
    for (double& v : style_map_.weight().data()) v *= 0.1;
    auto b = style_map_.bias().data();
    for (std::size_t i = 0; i < channels; ++i) {
      b[i] = 1.0;
      b[channels + i] = 0.0;
    }
  }
}

Tensor Norm::forward(const Tensor& x, const ForwardContext& ctx) {
  if (params_.kind == NormKind::adaptive_instance) {
    if (!ctx.style.defined()) throw std::invalid_argument("adaptive-instance norm called without a style vector");
    return normalize(x, params_, ctx.training, style_map_.forward(ctx.style));
  }
  return normalize(x, params_, ctx.training);
}

void Norm::collect(ParameterSet& out, const std::string& prefix) const {
  if (params_.kind == NormKind::adaptive_instance) {
    style_map_.collect(out, join_name(prefix, "style"));
    return;
  }
  out.add(join_name(prefix, "scale"), params_.scale);
  out.add(join_name(prefix, "shift"), params_.shift);
  if (params_.kind == NormKind::batch) {
    out.add(join_name(prefix, "running_mean"), params_.running_mean, false);
    out.add(join_name(prefix, "running_var"), params_.running_var, false);
  }
}

ResBlock::ResBlock(int dims, std::size_t c_in, std::size_t c_out, Rng& rng)
    : conv1_(dims, c_in, c_out, 3, rng),
      conv2_(dims, c_out, c_out, 3, rng),
      norm1_(NormKind::batch, c_out, 0, rng),
      norm2_(NormKind::batch, c_out, 0, rng),
      has_skip_(c_in != c_out) {
  if (has_skip_) skip_ = Conv(dims, c_in, c_out, 1, rng);
}

Tensor ResBlock::forward(const Tensor& grid, const ForwardContext& ctx) {
  Tensor h = relu(norm1_.forward(conv1_.forward(grid), ctx));
  h = norm2_.forward(conv2_.forward(h), ctx);
  Tensor skip = has_skip_ ? skip_.forward(grid) : grid;
  return relu(add(h, skip));
}

void ResBlock::collect(ParameterSet& out, const std::string& prefix) const {
  conv1_.collect(out, join_name(prefix, "conv1"));
  norm1_.collect(out, join_name(prefix, "norm1"));
  conv2_.collect(out, join_name(prefix, "conv2"));
  norm2_.collect(out, join_name(prefix, "norm2"));
  if (has_skip_) skip_.collect(out, join_name(prefix, "skip"));
}

MiniCnn::MiniCnn(int dims, std::vector<std::size_t> channels, Rng& rng) : channels_(std::move(channels)) {
  if (channels_.size() != 4) throw std::invalid_argument("mini-CNN needs 4 channel widths (in, c1, c2, c3)");
  for (std::size_t i = 0; i < 3; ++i) blocks_.emplace_back(dims, channels_[i], channels_[i + 1], rng);
}

Tensor MiniCnn::forward(const Tensor& grid, const ForwardContext& ctx) {
  Tensor h = blocks_[0].forward(grid, ctx);
  h = max_pool(h);
  h = blocks_[1].forward(h, ctx);
  h = max_pool(h);
  h = blocks_[2].forward(h, ctx);
  return avg_pool_global(h);
}

void MiniCnn::collect(ParameterSet& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, join_name(prefix, "res" + std::to_string(i + 1)));
}

}  // namespace cloudtf::nn
