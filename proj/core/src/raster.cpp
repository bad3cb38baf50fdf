#include "cloudtf/raster.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "cloudtf/ops.hpp"

namespace cloudtf {

void PointCloudBatch::validate() const {
  if (!positions.defined() || positions.rank() != 3 || positions.size(2) != 3) {
    throw std::invalid_argument("point cloud positions must be [B, N, 3]");
  }
  if (!features.defined() || features.rank() != 3 || features.size(0) != positions.size(0) ||
      features.size(1) != positions.size(1)) {
    throw std::invalid_argument("point cloud features must be [B, N, f] matching positions " +
                                shape_str(positions.shape()));
  }
  for (double v : positions.data())
    if (!std::isfinite(v)) throw std::invalid_argument("point cloud positions must be finite");
  const std::size_t n = batch() * points();
  if (!labels.empty() && labels.size() != n) throw std::invalid_argument("labels must have B*N entries");
  if (!fg_mask.empty() && fg_mask.size() != n) throw std::invalid_argument("fg_mask must have B*N entries");
  for (int m : fg_mask)
    if (m != 0 && m != 1) throw std::invalid_argument("fg_mask entries must be 0 or 1");
}

PointCloudBatch PointCloudBatch::with_features(Tensor new_features) const {
  PointCloudBatch out = *this;
  out.features = std::move(new_features);
  return out;
}

namespace raster {

KeyParams KeyParams::init(std::size_t feature_dim, bool anisotropic_scale, Rng& rng) {
  KeyParams kp;
  kp.residual_weight = init_uniform({feature_dim, 3}, feature_dim, rng);
  kp.residual_bias = init_uniform({3}, feature_dim, rng);
  kp.transform_linear = Tensor({3, 3}, random_rotation(rng), true);
  kp.transform_translation = Tensor({3}, true);
  if (anisotropic_scale) kp.log_scale = Tensor({3}, true);
  return kp;
}

void KeyParams::collect(ParameterSet& out, const std::string& prefix) const {
  out.add(join_name(prefix, "residual_weight"), residual_weight);
  out.add(join_name(prefix, "residual_bias"), residual_bias);
  out.add(join_name(prefix, "transform_linear"), transform_linear);
  out.add(join_name(prefix, "transform_translation"), transform_translation);
  if (log_scale.defined()) out.add(join_name(prefix, "log_scale"), log_scale);
}

Tensor compute_keys(const PointCloudBatch& pc, const KeyParams& kp, int dims) {
  if (dims != 2 && dims != 3) throw std::invalid_argument("compute_keys: dims must be 2 or 3");
  if (pc.feature_dim() != kp.residual_weight.size(0)) {
    throw std::invalid_argument("compute_keys: feature width " + std::to_string(pc.feature_dim()) +
                                " does not match residual weight " + shape_str(kp.residual_weight.shape()));
  }
  Tensor residual = affine(pc.features, kp.residual_weight, kp.residual_bias);
  Tensor shifted = add(pc.positions, residual);
  Tensor transformed = affine(shifted, kp.transform_linear, kp.transform_translation);
  if (kp.log_scale.defined()) transformed = mul(transformed, exp(kp.log_scale));
  if (dims == 2) transformed = slice(transformed, 2, 0, 2);

  const std::size_t per_sample = transformed.numel() / transformed.size(0);
  auto t = transformed.data();
  for (std::size_t b = 0; b < transformed.size(0); ++b) {
    for (std::size_t i = 0; i < per_sample; ++i) {
      if (!std::isfinite(t[b * per_sample + i])) {
        throw std::runtime_error("compute_keys: non-finite key pre-activation in batch element " +
                                 std::to_string(b));
      }
    }
  }
  return sigmoid(transformed);
}

std::size_t Footprint::cell_count() const {
  std::size_t n = 1;
  for (int a = 0; a < dims; ++a) n *= w;
  return n;
}

double Footprint::boundary_margin() const {
  double m = std::numeric_limits<double>::infinity();
  for (double t : frac) m = std::min({m, t, 1.0 - t});
  return m;
}

Footprint make_footprint(const Tensor& keys, std::size_t w) {
  if (w < 2) throw std::invalid_argument("make_footprint: grid size must be >= 2, got " + std::to_string(w));
  if (keys.rank() != 3 || (keys.size(2) != 2 && keys.size(2) != 3)) {
    throw std::invalid_argument("make_footprint: keys must be [B, N, 2|3], got " + shape_str(keys.shape()));
  }
  Footprint fp;
  fp.dims = static_cast<int>(keys.size(2));
  fp.w = w;
  fp.batch = keys.size(0);
  fp.points = keys.size(1);
  fp.keys = keys;
  const std::size_t np = fp.batch * fp.points;
  const std::size_t dims = static_cast<std::size_t>(fp.dims);
  const std::size_t corners = fp.corners();
  fp.cell_lo.resize(np * dims);
  fp.cell_hi.resize(np * dims);
  fp.frac.resize(np * dims);
  fp.weights.resize(np * corners);
  fp.cells.resize(np * corners);
  const double top = static_cast<double>(w - 1);
  auto k = keys.data();
  for (std::size_t p = 0; p < np; ++p) {
    for (std::size_t a = 0; a < dims; ++a) {
      const double u = std::clamp(top * k[p * dims + a], 0.0, top);
      auto lo = static_cast<std::int32_t>(std::floor(u));
      lo = std::min<std::int32_t>(lo, static_cast<std::int32_t>(w - 1));
      const std::int32_t hi = std::min<std::int32_t>(lo + 1, static_cast<std::int32_t>(w - 1));
      fp.cell_lo[p * dims + a] = lo;
      fp.cell_hi[p * dims + a] = hi;
      fp.frac[p * dims + a] = u - lo;
    }
    for (std::size_t c = 0; c < corners; ++c) {
      double weight = 1.0;
      std::int64_t cell = 0;
      for (std::size_t a = 0; a < dims; ++a) {
        const bool high = ((c >> (dims - 1 - a)) & 1u) != 0;
        const double t = fp.frac[p * dims + a];
        weight *= high ? t : 1.0 - t;
        cell = cell * static_cast<std::int64_t>(w) + (high ? fp.cell_hi[p * dims + a] : fp.cell_lo[p * dims + a]);
      }
      fp.weights[p * corners + c] = weight;
      fp.cells[p * corners + c] = cell;
    }
  }
  if (kink_tracking()) {
    report_kink_margin(fp.boundary_margin());
    report_kink_choices(fp.cell_lo);
  }
  return fp;
}

void balance_key_gradient(std::span<double> key_cotangent, std::size_t w) {
  const double inv = 1.0 / static_cast<double>(w);
  for (double& g : key_cotangent) g *= inv;
}

namespace {

// Chain rule from weight cotangents [np, corners] to key cotangents [np, dims].
std::vector<double> key_cotangent(const Footprint& fp, const std::vector<double>& weight_grad, bool balance) {
  const std::size_t dims = static_cast<std::size_t>(fp.dims);
  const std::size_t corners = fp.corners();
  const std::size_t np = fp.batch * fp.points;
  const double du_dk = static_cast<double>(fp.w - 1);
  std::vector<double> gk(np * dims, 0.0);
  for (std::size_t p = 0; p < np; ++p) {
    const double* t = fp.frac.data() + p * dims;
    for (std::size_t a = 0; a < dims; ++a) {
      double acc = 0.0;
      for (std::size_t c = 0; c < corners; ++c) {
        double d = ((c >> (dims - 1 - a)) & 1u) ? 1.0 : -1.0;
        for (std::size_t b = 0; b < dims; ++b) {
          if (b == a) continue;
          d *= ((c >> (dims - 1 - b)) & 1u) ? t[b] : 1.0 - t[b];
        }
        acc += weight_grad[p * corners + c] * d;
      }
      gk[p * dims + a] = du_dk * acc;
    }
  }
  if (balance) balance_key_gradient(gk, fp.w);
  return gk;
}

Shape grid_shape(const Footprint& fp, std::size_t channels) {
  Shape s{fp.batch};
  for (int a = 0; a < fp.dims; ++a) s.push_back(fp.w);
  s.push_back(channels);
  return s;
}

void check_values(const char* op, const Tensor& values, const Footprint& fp) {
  if (values.rank() != 3 || values.size(0) != fp.batch || values.size(1) != fp.points) {
    throw std::invalid_argument(std::string(op) + ": values " + shape_str(values.shape()) +
                                " do not match footprint [" + std::to_string(fp.batch) + ", " +
                                std::to_string(fp.points) + "]");
  }
}

GridMap scatter_max(const Tensor& values, const Footprint& fp, bool balance) {
  const std::size_t c = values.size(2);
  const std::size_t corners = fp.corners();
  const std::size_t cells = fp.cell_count();
  GridMap grid{fp.dims, fp.w, c, Tensor(grid_shape(fp, c)), {}, 0.0};
  grid.argmax.assign(fp.batch * cells * c, -1);
  auto out = grid.data.data();
  auto v = values.data();
  const bool track = kink_tracking();
  std::vector<double> second;
  if (track) second.assign(out.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t b = 0; b < fp.batch; ++b) {
    for (std::size_t p = 0; p < fp.points; ++p) {
      const std::size_t pi = b * fp.points + p;
      for (std::size_t k = 0; k < corners; ++k) {
        const double wt = fp.weights[pi * corners + k];
        const std::size_t base = (b * cells + static_cast<std::size_t>(fp.cells[pi * corners + k])) * c;
        const std::int64_t tag = static_cast<std::int64_t>(p * corners + k);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double contrib = wt * v[pi * c + ch];
          if (contrib > out[base + ch]) {
            if (track) second[base + ch] = out[base + ch];
            out[base + ch] = contrib;
            grid.argmax[base + ch] = tag;
          } else if (track) {
            second[base + ch] = std::max(second[base + ch], contrib);
          }
        }
      }
    }
  }
  double margin = std::numeric_limits<double>::infinity();
  if (track) {
    for (std::size_t i = 0; i < out.size(); ++i) margin = std::min(margin, out[i] - second[i]);
    report_kink_margin(margin);
    report_kink_choices(grid.argmax);
  }
  grid.tie_margin = margin;

  const std::vector<std::int64_t> argmax = grid.argmax;
  grid.data = Tape::active().record(
      "rasterize_max", grid.data, {values, fp.keys},
      [values, fp, argmax, c, cells, corners, balance](std::span<const double> g) {
        auto v = values.data();
        std::vector<double> gv(values.numel(), 0.0);
        std::vector<double> gw(fp.weights.size(), 0.0);
        for (std::size_t b = 0; b < fp.batch; ++b) {
          for (std::size_t cell = 0; cell < cells; ++cell) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t idx = (b * cells + cell) * c + ch;
              const std::int64_t tag = argmax[idx];
              if (tag < 0) continue;
              const std::size_t p = static_cast<std::size_t>(tag) / corners;
              const std::size_t k = static_cast<std::size_t>(tag) % corners;
              const std::size_t pi = b * fp.points + p;
              gv[pi * c + ch] += g[idx] * fp.weights[pi * corners + k];
              gw[pi * corners + k] += g[idx] * v[pi * c + ch];
            }
          }
        }
        std::vector<std::vector<double>> grads(2);
        grads[0] = std::move(gv);
        if (fp.keys.requires_grad()) grads[1] = key_cotangent(fp, gw, balance);
        return grads;
      });
  return grid;
}

GridMap scatter_additive(const Tensor& values, const Footprint& fp, bool mean, bool balance) {
  const std::size_t c = values.size(2);
  const std::size_t corners = fp.corners();
  const std::size_t cells = fp.cell_count();
  GridMap grid{fp.dims, fp.w, c, Tensor(grid_shape(fp, c)), {}, 0.0};
  auto out = grid.data.data();
  auto v = values.data();
  std::vector<double> mass(fp.batch * cells, 0.0);
  for (std::size_t b = 0; b < fp.batch; ++b) {
    for (std::size_t p = 0; p < fp.points; ++p) {
      const std::size_t pi = b * fp.points + p;
      for (std::size_t k = 0; k < corners; ++k) {
        const double wt = fp.weights[pi * corners + k];
        const std::size_t cell = b * cells + static_cast<std::size_t>(fp.cells[pi * corners + k]);
        mass[cell] += wt;
        for (std::size_t ch = 0; ch < c; ++ch) out[cell * c + ch] += wt * v[pi * c + ch];
      }
    }
  }
  if (mean) {
    for (std::size_t cell = 0; cell < mass.size(); ++cell) {
      if (mass[cell] > 0.0)
        for (std::size_t ch = 0; ch < c; ++ch) out[cell * c + ch] /= mass[cell];
    }
  }
  const Tensor result = grid.data;
  grid.data = Tape::active().record(
      mean ? "rasterize_mean" : "rasterize_sum", grid.data, {values, fp.keys},
      [values, fp, mass, result, c, cells, corners, mean, balance](std::span<const double> g) {
        auto v = values.data();
        auto out = result.data();
        // Cotangent of the pre-division sums and of the per-cell mass.
        std::vector<double> gs(g.begin(), g.end());
        std::vector<double> gm(mass.size(), 0.0);
        if (mean) {
          for (std::size_t cell = 0; cell < mass.size(); ++cell) {
            if (mass[cell] <= 0.0) {
              for (std::size_t ch = 0; ch < c; ++ch) gs[cell * c + ch] = 0.0;
              continue;
            }
            double acc = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) {
              gs[cell * c + ch] = g[cell * c + ch] / mass[cell];
              acc -= g[cell * c + ch] * out[cell * c + ch] / mass[cell];
            }
            gm[cell] = acc;
          }
        }
        std::vector<double> gv(values.numel(), 0.0);
        std::vector<double> gw(fp.weights.size(), 0.0);
        for (std::size_t b = 0; b < fp.batch; ++b) {
          for (std::size_t p = 0; p < fp.points; ++p) {
            const std::size_t pi = b * fp.points + p;
            for (std::size_t k = 0; k < corners; ++k) {
              const double wt = fp.weights[pi * corners + k];
              const std::size_t cell = b * cells + static_cast<std::size_t>(fp.cells[pi * corners + k]);
              double acc = gm[cell];
              for (std::size_t ch = 0; ch < c; ++ch) {
                gv[pi * c + ch] += wt * gs[cell * c + ch];
                acc += gs[cell * c + ch] * v[pi * c + ch];
              }
              gw[pi * corners + k] = acc;
            }
          }
        }
        std::vector<std::vector<double>> grads(2);
        grads[0] = std::move(gv);
        if (fp.keys.requires_grad()) grads[1] = key_cotangent(fp, gw, balance);
        return grads;
      });
  return grid;
}

}  // namespace

std::string to_string(Aggregation agg) {
  switch (agg) {
    case Aggregation::max: return "max";
    case Aggregation::sum: return "sum";
    case Aggregation::mean: return "mean";
  }
  return "max";
}

Aggregation parse_aggregation(const std::string& name) {
  if (name == "max") return Aggregation::max;
  if (name == "sum") return Aggregation::sum;
  if (name == "mean") return Aggregation::mean;
  throw std::invalid_argument("unknown aggregation '" + name + "' (expected max|sum|mean)");
}

GridMap rasterize(const Tensor& values, const Footprint& fp, const RasterOptions& options) {
  check_values("rasterize", values, fp);
  switch (options.aggregation) {
    case Aggregation::max: return scatter_max(values, fp, options.balance_gradient);
    case Aggregation::sum: return scatter_additive(values, fp, false, options.balance_gradient);
    case Aggregation::mean: return scatter_additive(values, fp, true, options.balance_gradient);
  }
  throw std::invalid_argument("rasterize: unknown aggregation");
}

GridMap rasterize_max(const Tensor& values, const Footprint& fp, bool balance_gradient) {
  return rasterize(values, fp, {Aggregation::max, balance_gradient});
}

GridMap rasterize_sum(const Tensor& values, const Footprint& fp, bool balance_gradient) {
  return rasterize(values, fp, {Aggregation::sum, balance_gradient});
}

GridMap rasterize_mean(const Tensor& values, const Footprint& fp, bool balance_gradient) {
  return rasterize(values, fp, {Aggregation::mean, balance_gradient});
}

Tensor derasterize(const Tensor& grid, const Footprint& fp, bool balance_gradient) {
  const std::size_t cells = fp.cell_count();
  if (grid.rank() != static_cast<std::size_t>(fp.dims) + 2 || grid.size(0) != fp.batch ||
      grid.numel() / grid.shape().back() != fp.batch * cells) {
    throw std::invalid_argument("derasterize: grid " + shape_str(grid.shape()) + " does not match a " +
                                std::to_string(fp.dims) + "D footprint with w=" + std::to_string(fp.w));
  }
  for (int a = 0; a < fp.dims; ++a)
    if (grid.size(1 + static_cast<std::size_t>(a)) != fp.w)
      throw std::invalid_argument("derasterize: grid " + shape_str(grid.shape()) + " is not w=" + std::to_string(fp.w));
  const std::size_t c = grid.shape().back();
  const std::size_t corners = fp.corners();
  Tensor out({fp.batch, fp.points, c});
  auto o = out.data();
  auto gd = grid.data();
  for (std::size_t b = 0; b < fp.batch; ++b) {
    for (std::size_t p = 0; p < fp.points; ++p) {
      const std::size_t pi = b * fp.points + p;
      double* orow = o.data() + pi * c;
      for (std::size_t k = 0; k < corners; ++k) {
        const double wt = fp.weights[pi * corners + k];
        const double* src = gd.data() + (b * cells + static_cast<std::size_t>(fp.cells[pi * corners + k])) * c;
        for (std::size_t ch = 0; ch < c; ++ch) orow[ch] += wt * src[ch];
      }
    }
  }
  return Tape::active().record(
      "derasterize", out, {grid, fp.keys}, [grid, fp, c, cells, corners, balance_gradient](std::span<const double> g) {
        auto gd = grid.data();
        std::vector<double> gg;
        if (grid.requires_grad()) gg.assign(grid.numel(), 0.0);
        std::vector<double> gw(fp.weights.size(), 0.0);
        for (std::size_t b = 0; b < fp.batch; ++b) {
          for (std::size_t p = 0; p < fp.points; ++p) {
            const std::size_t pi = b * fp.points + p;
            const double* grow = g.data() + pi * c;
            for (std::size_t k = 0; k < corners; ++k) {
              const double wt = fp.weights[pi * corners + k];
              const std::size_t base = (b * cells + static_cast<std::size_t>(fp.cells[pi * corners + k])) * c;
              double acc = 0.0;
              for (std::size_t ch = 0; ch < c; ++ch) acc += grow[ch] * gd[base + ch];
              gw[pi * corners + k] = acc;
              if (!gg.empty())
                for (std::size_t ch = 0; ch < c; ++ch) gg[base + ch] += wt * grow[ch];
            }
          }
        }
        std::vector<std::vector<double>> grads(2);
        grads[0] = std::move(gg);
        if (fp.keys.requires_grad()) grads[1] = key_cotangent(fp, gw, balance_gradient);
        return grads;
      });
}

std::array<std::array<double, 2>, 4> bilinear_jacobian_d(std::array<double, 2> key, std::size_t extent) {
  const double u0 = static_cast<double>(extent) * key[0];
  const double u1 = static_cast<double>(extent) * key[1];
  const double c0 = u0 - std::ceil(u0), f0 = u0 - std::floor(u0);
  const double c1 = u1 - std::ceil(u1), f1 = u1 - std::floor(u1);
  return {{{c1, c0}, {-f1, -c0}, {-c1, -f0}, {f1, f0}}};
}

double key_jacobian_check(std::array<double, 2> key, std::size_t extent) {
  if (extent < 1) throw std::invalid_argument("key_jacobian_check: extent must be >= 1");
  for (double k : key) {
    const double u = static_cast<double>(extent) * k;
    const double t = u - std::floor(u);
    if (k <= 0.0 || k >= 1.0 || t < 0.05 || t > 0.95) {
      throw std::invalid_argument("key_jacobian_check: key must sit inside a cell (frac in [0.05, 0.95])");
    }
  }
  auto weights_at = [extent](double k0, double k1) {
    NoGradGuard guard;
    Footprint fp = make_footprint(Tensor({1, 1, 2}, {k0, k1}), extent + 1);
    return fp.weights;
  };
  const auto d = bilinear_jacobian_d(key, extent);
  const double h = 1e-6;
  double max_err = 0.0;
  for (std::size_t axis = 0; axis < 2; ++axis) {
    std::array<double, 2> plus = key, minus = key;
    plus[axis] += h;
    minus[axis] -= h;
    const auto wp = weights_at(plus[0], plus[1]);
    const auto wm = weights_at(minus[0], minus[1]);
    for (std::size_t r = 0; r < 4; ++r) {
      const double fd = (wp[r] - wm[r]) / (2 * h);
      const double analytic = static_cast<double>(extent) * d[r][axis];
      max_err = std::max(max_err, std::abs(fd - analytic));
    }
  }
  return max_err;
}

std::array<std::array<double, 2>, 4> lemma_d_matrix(double a, double b) {
  return {{{a, b}, {-(1 + a), -b}, {-a, -(1 + b)}, {1 + a, 1 + b}}};
}

Lemma2Report verify_lemma2(std::size_t samples, Rng& rng, double tolerance) {
  if (samples < 1) throw std::invalid_argument("verify_lemma2: samples must be >= 1");
  Lemma2Report report;
  report.samples = samples;
  report.min_bound_ratio = std::numeric_limits<double>::infinity();
  double worst = -1.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const double a = uniform(rng, -1.0, 0.0);
    const double b = uniform(rng, -1.0, 0.0);
    const auto dm = lemma_d_matrix(a, b);
    Eigen::Matrix<double, 4, 2> d;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 2; ++c) d(r, c) = dm[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];

    const Eigen::Matrix4d ddt = d * d.transpose();
    Eigen::JacobiSVD<Eigen::Matrix4d> svd(ddt);
    const Eigen::Vector4d sv = svd.singularValues();  // descending
    const double sigma1 = (2 * a + 1) * (2 * a + 1) + (2 * b + 1) * (2 * b + 1) + 1;
    const double hi = std::max(sigma1, 1.0), lo = std::min(sigma1, 1.0);
    const double dev = std::max({std::abs(sv(0) - hi), std::abs(sv(1) - lo), std::abs(sv(2)), std::abs(sv(3))});
    if (dev > worst) {
      worst = dev;
      report.worst_a = a;
      report.worst_b = b;
    }

    Eigen::Matrix2d m;
    m << normal(rng), normal(rng), normal(rng), normal(rng);
    const Eigen::Matrix2d var = m * m.transpose();
    const double var_norm = Eigen::JacobiSVD<Eigen::Matrix2d>(var).singularValues()(0);
    const Eigen::Matrix4d mapped = d * var * d.transpose();
    const double mapped_norm = Eigen::JacobiSVD<Eigen::Matrix4d>(mapped).singularValues()(0);
    if (var_norm > 0.0) report.min_bound_ratio = std::min(report.min_bound_ratio, mapped_norm / var_norm);
  }
  report.max_singular_deviation = worst;
  report.passed = worst <= tolerance && report.min_bound_ratio >= 0.5;
  if (!report.passed) {
    std::ostringstream os;
    os.precision(17);
    if (worst > tolerance) {
      os << "singular values deviate by " << worst << " at (a, b) = (" << report.worst_a << ", " << report.worst_b
         << ")";
    } else {
      os << "spectral bound ratio " << report.min_bound_ratio << " < 0.5";
    }
    report.failure = os.str();
  }
  return report;
}

}  // namespace raster
}  // namespace cloudtf
