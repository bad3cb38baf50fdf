#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cloudtf/parameters.hpp"
#include "cloudtf/tensor.hpp"

namespace cloudtf {

/// Batch of point sets: positions [B, N, 3], features [B, N, f], with optional
/// per-point integer labels and foreground mask (both B*N, row-major).
struct PointCloudBatch {
  Tensor positions;
  Tensor features;
  std::vector<int> labels;
  std::vector<int> fg_mask;

  std::size_t batch() const { return positions.size(0); }
  std::size_t points() const { return positions.size(1); }
  std::size_t feature_dim() const { return features.size(2); }

  /// Throws std::invalid_argument when shapes disagree or positions are not finite.
  void validate() const;
  PointCloudBatch with_features(Tensor new_features) const;
};

namespace raster {

/// Learnable key predictor: k = sigmoid(project(scale * T(p + d(x)))).
/// T is stored as a row-vector map: T(q) = q * transform_linear + translation.
struct KeyParams {
  Tensor residual_weight;        // [f, 3]
  Tensor residual_bias;          // [3]
  Tensor transform_linear;       // [3, 3]
  Tensor transform_translation;  // [3]
  Tensor log_scale;              // [3], undefined unless the scale variant is on

  static KeyParams init(std::size_t feature_dim, bool anisotropic_scale, Rng& rng);
  void collect(ParameterSet& out, const std::string& prefix) const;
};

/// Keys in (0,1)^dims for dims in {2, 3}; 2D heads drop the third coordinate.
Tensor compute_keys(const PointCloudBatch& pc, const KeyParams& kp, int dims);

/// Enclosing cells and multilinear weights of each key on a grid with `w`
/// nodes per axis, using u = (w - 1) * k. Corners are ordered
/// lexicographically over (lo/hi per axis), axis 0 most significant.
struct Footprint {
  int dims = 2;
  std::size_t w = 0;
  std::size_t batch = 0;
  std::size_t points = 0;
  std::vector<std::int32_t> cell_lo;  // [B, N, dims]
  std::vector<std::int32_t> cell_hi;  // [B, N, dims]
  std::vector<double> frac;           // [B, N, dims]
  std::vector<double> weights;        // [B, N, 2^dims]
  std::vector<std::int64_t> cells;    // [B, N, 2^dims] flat cell index within one sample's grid
  Tensor keys;                        // source of the key gradient

  std::size_t corners() const { return std::size_t{1} << dims; }
  std::size_t cell_count() const;
  /// Smallest distance of any fractional offset to a cell boundary.
  double boundary_margin() const;
};

Footprint make_footprint(const Tensor& keys, std::size_t w);

enum class Aggregation { max, sum, mean };

std::string to_string(Aggregation agg);
Aggregation parse_aggregation(const std::string& name);

struct RasterOptions {
  Aggregation aggregation = Aggregation::max;
  bool balance_gradient = true;
};

/// Grid produced by rasterization. data is [B, w, w, c] or [B, w, w, w, c].
/// argmax holds, per (sample, cell, channel), the winning point * 2^dims +
/// corner, or -1 when the cell kept its zero initialization (max only).
struct GridMap {
  int dims = 2;
  std::size_t w = 0;
  std::size_t channels = 0;
  Tensor data;
  std::vector<std::int64_t> argmax;
  /// Smallest gap between the winning and runner-up contribution (max only).
  double tie_margin = 0.0;
};

GridMap rasterize(const Tensor& values, const Footprint& fp, const RasterOptions& options);
GridMap rasterize_max(const Tensor& values, const Footprint& fp, bool balance_gradient = false);
GridMap rasterize_sum(const Tensor& values, const Footprint& fp, bool balance_gradient = false);
GridMap rasterize_mean(const Tensor& values, const Footprint& fp, bool balance_gradient = false);

/// Bilinear (trilinear) sampling of `grid` [B, w.., c] at the footprint keys.
Tensor derasterize(const Tensor& grid, const Footprint& fp, bool balance_gradient = false);

/// Divides a key cotangent by the grid size w.
void balance_key_gradient(std::span<double> key_cotangent, std::size_t w);

/// D of the bilinear Jacobian db/dk = extent * D for a 2D key, where extent is
/// the number of cells spanned by the unit key range (the grid has extent + 1
/// nodes). Rows follow corner order (00, 01, 10, 11); columns are (k0, k1).
std::array<std::array<double, 2>, 4> bilinear_jacobian_d(std::array<double, 2> key, std::size_t extent);

/// Max |analytic - finite-difference| over the 4x2 Jacobian of the bilinear
/// weights w.r.t. the key, on a grid spanning `extent` cells.
double key_jacobian_check(std::array<double, 2> key, std::size_t extent);

struct Lemma2Report {
  std::size_t samples = 0;
  double max_singular_deviation = 0.0;  // vs {1, (2a+1)^2 + (2b+1)^2 + 1}
  double min_bound_ratio = 0.0;         // min ||D V D^T|| / ||V|| over random PSD V
  double worst_a = 0.0;
  double worst_b = 0.0;
  bool passed = false;
  std::string failure;
};

/// The 4x2 matrix D for -1 <= a, b <= 0 (the in-cell Jacobian form).
std::array<std::array<double, 2>, 4> lemma_d_matrix(double a, double b);

Lemma2Report verify_lemma2(std::size_t samples, Rng& rng, double tolerance = 1e-9);

}  // namespace raster
}  // namespace cloudtf
