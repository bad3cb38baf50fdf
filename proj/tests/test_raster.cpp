#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "cloudtf/ops.hpp"
#include "cloudtf/raster.hpp"
#include "support.hpp"

using namespace cloudtf;
using namespace cloudtf::raster;
using cloudtf::testing::fd_check;
using cloudtf::testing::filled;
using cloudtf::testing::to_vector;

namespace {

// Independent bilinear/trilinear weights: corner index -> (flat cell, weight).
std::vector<std::pair<std::size_t, double>> corner_weights(const double* key, int dims, std::size_t w) {
  std::vector<std::size_t> lo(dims);
  std::vector<double> t(dims);
  for (int a = 0; a < dims; ++a) {
    const double u = key[a] * static_cast<double>(w - 1);
    lo[a] = std::min(static_cast<std::size_t>(u), w - 2);
    t[a] = u - static_cast<double>(lo[a]);
  }
  std::vector<std::pair<std::size_t, double>> out;
  for (int c = 0; c < (1 << dims); ++c) {
    std::size_t cell = 0;
    double weight = 1.0;
    for (int a = 0; a < dims; ++a) {
      const int bit = (c >> (dims - 1 - a)) & 1;
      cell = cell * w + lo[a] + bit;
      weight *= bit ? t[a] : 1.0 - t[a];
    }
    out.emplace_back(cell, weight);
  }
  return out;
}

std::size_t cells_of(int dims, std::size_t w) { return dims == 2 ? w * w : w * w * w; }

// Brute-force rasterization. mode 0 max, 1 sum, 2 mean.
std::vector<double> brute_raster(const Tensor& values, const Tensor& keys, std::size_t w, int mode) {
  const std::size_t b = keys.size(0), n = keys.size(1), c = values.size(2);
  const int dims = static_cast<int>(keys.size(2));
  const std::size_t cells = cells_of(dims, w);
  std::vector<double> out(b * cells * c, mode == 0 ? 0.0 : 0.0);
  std::vector<double> mass(b * cells, 0.0);
  std::vector<double> best(b * cells * c, -std::numeric_limits<double>::infinity());
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t p = 0; p < n; ++p)
      for (auto [cell, wt] : corner_weights(keys.data().data() + (s * n + p) * dims, dims, w)) {
        mass[s * cells + cell] += wt;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double contrib = wt * values.data()[(s * n + p) * c + ch];
          const std::size_t i = (s * cells + cell) * c + ch;
          if (mode == 0) {
            best[i] = std::max(best[i], contrib);
          } else {
            out[i] += contrib;
          }
        }
      }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mode == 0) out[i] = std::max(0.0, best[i]);
    if (mode == 2 && mass[i / c] > 0.0) out[i] /= mass[i / c];
  }
  return out;
}

Tensor interior_keys(Shape shape, Rng& rng) { return filled(std::move(shape), rng, 0.03, 0.97); }

}  // namespace

TEST(Footprint, WeightsFormPartitionOfUnity) {
  Rng rng(1);
  for (int dims : {2, 3}) {
    Tensor keys = filled({2, 50, static_cast<std::size_t>(dims)}, rng, 0.0, 1.0);
    const Footprint fp = make_footprint(keys, 7);
    for (std::size_t p = 0; p < 100; ++p) {
      double total = 0.0;
      for (std::size_t c = 0; c < fp.corners(); ++c) {
        EXPECT_GE(fp.weights[p * fp.corners() + c], 0.0);
        total += fp.weights[p * fp.corners() + c];
      }
      EXPECT_NEAR(total, 1.0, 1e-14);
    }
  }
}

TEST(Footprint, MatchesIndependentWeights) {
  Rng rng(2);
  Tensor keys = interior_keys({1, 20, 3}, rng);
  const Footprint fp = make_footprint(keys, 5);
  for (std::size_t p = 0; p < 20; ++p) {
    const auto expect = corner_weights(keys.data().data() + p * 3, 3, 5);
    for (std::size_t c = 0; c < 8; ++c) {
      EXPECT_EQ(static_cast<std::size_t>(fp.cells[p * 8 + c]), expect[c].first);
      EXPECT_NEAR(fp.weights[p * 8 + c], expect[c].second, 1e-14);
    }
  }
}

TEST(Footprint, KeysOnTheUpperFaceLandOnTheLastNode) {
  const Footprint fp = make_footprint(Tensor({1, 1, 2}, {1.0, 0.0}), 4);
  double on_target = 0.0;
  for (std::size_t c = 0; c < 4; ++c)
    if (fp.cells[c] == 3 * 4 + 0) on_target += fp.weights[c];
  EXPECT_NEAR(on_target, 1.0, 1e-15);
}

TEST(Footprint, RejectsBadArguments) {
  EXPECT_THROW(make_footprint(Tensor({1, 4, 2}), 1), std::invalid_argument);
  EXPECT_THROW(make_footprint(Tensor({1, 4, 4}), 8), std::invalid_argument);
  EXPECT_THROW(make_footprint(Tensor({4, 2}), 8), std::invalid_argument);
}

class RasterOracle : public ::testing::TestWithParam<std::tuple<int, int>> {};

TEST_P(RasterOracle, MatchesBruteForce) {
  const auto [dims, mode] = GetParam();
  Rng rng(10 + dims * 3 + mode);
  const std::size_t w = dims == 2 ? 6 : 4;
  Tensor keys = filled({2, 40, static_cast<std::size_t>(dims)}, rng, 0.0, 1.0);
  Tensor values = filled({2, 40, 3}, rng);
  const Footprint fp = make_footprint(keys, w);
  const Aggregation agg = mode == 0 ? Aggregation::max : mode == 1 ? Aggregation::sum : Aggregation::mean;
  const GridMap grid = rasterize(values, fp, {agg, false});
  Shape expect_shape{2};
  for (int a = 0; a < dims; ++a) expect_shape.push_back(w);
  expect_shape.push_back(3);
  ASSERT_EQ(grid.data.shape(), expect_shape);
  const auto expect = brute_raster(values, keys, w, mode);
  const auto got = to_vector(grid.data);
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(got[i], expect[i], 1e-12) << i;
}

INSTANTIATE_TEST_SUITE_P(All, RasterOracle,
                         ::testing::Combine(::testing::Values(2, 3), ::testing::Values(0, 1, 2)));

TEST(Rasterize, EmptyCellsStayZeroUnderMax) {
  Tensor keys({1, 1, 2}, {0.1, 0.1});
  Tensor values({1, 1, 1}, std::vector<double>{-5.0});
  const GridMap grid = rasterize_max(values, make_footprint(keys, 8));
  for (double v : grid.data.data()) EXPECT_EQ(v, 0.0);
  for (auto a : grid.argmax) EXPECT_EQ(a, -1);
}

TEST(Derasterize, MatchesBilinearFormula) {
  Rng rng(4);
  const std::size_t w = 5;
  Tensor grid = filled({1, w, w, 2}, rng);
  Tensor keys = interior_keys({1, 30, 2}, rng);
  const Tensor out = derasterize(grid, make_footprint(keys, w));
  for (std::size_t p = 0; p < 30; ++p) {
    const double u = keys.data()[p * 2] * (w - 1), v = keys.data()[p * 2 + 1] * (w - 1);
    const auto i = static_cast<std::size_t>(u), j = static_cast<std::size_t>(v);
    const double s = u - i, t = v - j;
    for (std::size_t ch = 0; ch < 2; ++ch) {
      auto g = [&](std::size_t a, std::size_t b) { return grid.data()[(a * w + b) * 2 + ch]; };
      const double expect = (1 - s) * (1 - t) * g(i, j) + (1 - s) * t * g(i, j + 1) + s * (1 - t) * g(i + 1, j) +
                            s * t * g(i + 1, j + 1);
      EXPECT_NEAR(out.data()[p * 2 + ch], expect, 1e-12);
    }
  }
}

TEST(Derasterize, ReproducesAffineFieldsExactly) {
  // Multilinear interpolation is exact on functions linear in each axis.
  const std::size_t w = 6;
  Tensor grid({1, w, w, w, 1});
  for (std::size_t a = 0; a < w; ++a)
    for (std::size_t b = 0; b < w; ++b)
      for (std::size_t c = 0; c < w; ++c)
        grid.data()[(a * w + b) * w + c] = 0.5 + 2.0 * a - 1.0 * b + 0.25 * c;
  Rng rng(5);
  Tensor keys = filled({1, 25, 3}, rng, 0.0, 1.0);
  const Tensor out = derasterize(grid, make_footprint(keys, w));
  for (std::size_t p = 0; p < 25; ++p) {
    const double* k = keys.data().data() + p * 3;
    const double s = static_cast<double>(w - 1);
    EXPECT_NEAR(out.data()[p], 0.5 + 2.0 * s * k[0] - s * k[1] + 0.25 * s * k[2], 1e-12);
  }
}

TEST(Derasterize, MeanRoundTripOfIsolatedPointsIsIdentity) {
  // Points far enough apart that no cell is shared.
  Tensor keys({1, 2, 2}, {0.05, 0.05, 0.9, 0.9});
  Tensor values({1, 2, 3}, {1, -2, 3, 4, 5, -6});
  const Footprint fp = make_footprint(keys, 16);
  const Tensor back = derasterize(rasterize_mean(values, fp).data, fp);
  const auto got = to_vector(back);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], values.data()[i], 1e-12);
}

TEST(Derasterize, RejectsMismatchedGrid) {
  const Footprint fp = make_footprint(Tensor({1, 3, 2}), 4);
  EXPECT_THROW(derasterize(Tensor({1, 5, 5, 2}), fp), std::invalid_argument);
  EXPECT_THROW(derasterize(Tensor({1, 4, 4, 4, 2}), fp), std::invalid_argument);
  EXPECT_THROW(rasterize_sum(Tensor({1, 2, 2}), fp), std::invalid_argument);
}

class RasterGradient : public ::testing::TestWithParam<std::tuple<int, Aggregation>> {};

TEST_P(RasterGradient, ValuesAndKeysMatchCentralDifferences) {
  const auto [dims, agg] = GetParam();
  Rng rng(20 + dims);
  const std::size_t w = 4;
  const auto d = static_cast<std::size_t>(dims);
  // Few points on a roomy grid keeps max ties and cell crossings away.
  Tensor keys = interior_keys({1, 3, d}, rng);
  for (double& k : keys.data()) {
    const double u = k * (w - 1);
    k = (std::floor(u) + 0.5 + 0.3 * (u - std::floor(u) - 0.5)) / (w - 1);
  }
  Tensor values = filled({1, 3, 2}, rng, 0.5, 2.0);
  Shape gs{1};
  for (int a = 0; a < dims; ++a) gs.push_back(w);
  gs.push_back(2);
  Tensor r = filled(gs, rng, -1.0, 1.0);
  const double err = fd_check(
      [&] {
        const Footprint fp = make_footprint(keys, w);
        return sum(mul(rasterize(values, fp, {agg, false}).data, r));
      },
      {values, keys});
  EXPECT_LT(err, 1e-6);
}

INSTANTIATE_TEST_SUITE_P(All, RasterGradient,
                         ::testing::Combine(::testing::Values(2, 3),
                                            ::testing::Values(Aggregation::max, Aggregation::sum,
                                                              Aggregation::mean)));

TEST(Derasterize, GradientMatchesCentralDifferences) {
  Rng rng(30);
  Tensor grid = filled({2, 5, 5, 5, 2}, rng);
  Tensor keys = interior_keys({2, 6, 3}, rng);
  Tensor r = filled({2, 6, 2}, rng);
  const double err = fd_check([&] { return sum(mul(derasterize(grid, make_footprint(keys, 5)), r)); }, {grid, keys});
  EXPECT_LT(err, 1e-6);
}

TEST(Balancing, ScalesOnlyTheKeyGradientByInverseGridSize) {
  Rng rng(40);
  for (std::size_t w : {4u, 16u, 64u}) {
    Tensor keys = interior_keys({1, 8, 2}, rng);
    Tensor values = filled({1, 8, 3}, rng);
    Tensor r = filled({1, w, w, 3}, rng);
    std::vector<double> key_grad[2], value_grad[2];
    for (int balanced = 0; balanced < 2; ++balanced) {
      keys.set_requires_grad(true);
      values.set_requires_grad(true);
      keys.zero_grad();
      values.zero_grad();
      const Footprint fp = make_footprint(keys, w);
      backward(sum(mul(rasterize_sum(values, fp, balanced == 1).data, r)));
      key_grad[balanced] = {keys.grad().begin(), keys.grad().end()};
      value_grad[balanced] = {values.grad().begin(), values.grad().end()};
    }
    EXPECT_EQ(value_grad[0], value_grad[1]);
    for (std::size_t i = 0; i < key_grad[0].size(); ++i)
      EXPECT_DOUBLE_EQ(key_grad[1][i], key_grad[0][i] / static_cast<double>(w));
  }
}

TEST(Balancing, DerasterizeKeyGradientAlsoScaled) {
  Rng rng(41);
  Tensor grid = filled({1, 8, 8, 1}, rng);
  Tensor keys = interior_keys({1, 4, 2}, rng);
  std::vector<double> g[2];
  for (int balanced = 0; balanced < 2; ++balanced) {
    keys.set_requires_grad(true);
    keys.zero_grad();
    backward(sum(derasterize(grid, make_footprint(keys, 8), balanced == 1)));
    g[balanced] = {keys.grad().begin(), keys.grad().end()};
  }
  for (std::size_t i = 0; i < g[0].size(); ++i) EXPECT_DOUBLE_EQ(g[1][i], g[0][i] / 8.0);
}

TEST(Jacobian, AnalyticMatchesFootprintDifferences) {
  Rng rng(50);
  for (std::size_t extent : {3u, 15u, 63u}) {
    for (int trial = 0; trial < 20; ++trial) {
      // Keep the key inside one cell so the footprint is differentiable.
      const double k0 = (std::floor(uniform(rng, 0.0, extent)) + uniform(rng, 0.2, 0.8)) / extent;
      const double k1 = (std::floor(uniform(rng, 0.0, extent)) + uniform(rng, 0.2, 0.8)) / extent;
      const auto d = bilinear_jacobian_d({k0, k1}, extent);
      const double h = 1e-7;
      for (int axis = 0; axis < 2; ++axis) {
        Tensor up({1, 1, 2}, {k0, k1}), down({1, 1, 2}, {k0, k1});
        up.data()[axis] += h;
        down.data()[axis] -= h;
        const Footprint fu = make_footprint(up, extent + 1), fd = make_footprint(down, extent + 1);
        for (std::size_t c = 0; c < 4; ++c) {
          const double numeric = (fu.weights[c] - fd.weights[c]) / (2 * h);
          EXPECT_NEAR(static_cast<double>(extent) * d[c][axis], numeric, 1e-6 * extent);
        }
      }
      EXPECT_LT(key_jacobian_check({k0, k1}, extent), 1e-6);
    }
  }
}

TEST(Lemma, SingularValuesAndBoundHold) {
  Rng rng(60);
  const Lemma2Report rep = verify_lemma2(500, rng);
  EXPECT_TRUE(rep.passed) << rep.failure;
  EXPECT_LT(rep.max_singular_deviation, 1e-9);
  EXPECT_GE(rep.min_bound_ratio, 1.0 - 1e-9);
}

TEST(Lemma, DMatrixSingularValuesAtCorners) {
  // Independent check through D^T D at a = b = 0: singular values squared
  // are the eigenvalues of the 2x2 Gram matrix.
  for (auto [a, b] : std::vector<std::pair<double, double>>{{0, 0}, {-1, -1}, {-0.5, -0.25}, {-0.1, -0.9}}) {
    const auto d = lemma_d_matrix(a, b);
    double g00 = 0, g01 = 0, g11 = 0;
    for (const auto& row : d) {
      g00 += row[0] * row[0];
      g01 += row[0] * row[1];
      g11 += row[1] * row[1];
    }
    const double tr = g00 + g11, det = g00 * g11 - g01 * g01;
    const double disc = std::sqrt(tr * tr / 4 - det);
    const double lo = tr / 2 - disc, hi = tr / 2 + disc;
    EXPECT_NEAR(lo, 1.0, 1e-12);
    EXPECT_NEAR(hi, (2 * a + 1) * (2 * a + 1) + (2 * b + 1) * (2 * b + 1) + 1, 1e-12);
  }
}

TEST(Keys, LieInsideUnitBoxAndDropThirdAxisIn2d) {
  Rng rng(70);
  PointCloudBatch pc;
  pc.positions = filled({2, 10, 3}, rng);
  pc.features = filled({2, 10, 4}, rng);
  const KeyParams kp = KeyParams::init(4, true, rng);
  const Tensor k3 = compute_keys(pc, kp, 3);
  const Tensor k2 = compute_keys(pc, kp, 2);
  ASSERT_EQ(k3.shape(), (Shape{2, 10, 3}));
  ASSERT_EQ(k2.shape(), (Shape{2, 10, 2}));
  for (std::size_t p = 0; p < 20; ++p) {
    for (std::size_t a = 0; a < 2; ++a) EXPECT_EQ(k2.data()[p * 2 + a], k3.data()[p * 3 + a]);
    for (std::size_t a = 0; a < 3; ++a) {
      EXPECT_GT(k3.data()[p * 3 + a], 0.0);
      EXPECT_LT(k3.data()[p * 3 + a], 1.0);
    }
  }
  EXPECT_THROW(compute_keys(pc, kp, 4), std::invalid_argument);
  pc.features = filled({2, 10, 5}, rng);
  EXPECT_THROW(compute_keys(pc, kp, 3), std::invalid_argument);
}

TEST(Keys, NonFiniteInputIsReported) {
  Rng rng(71);
  PointCloudBatch pc;
  pc.positions = filled({1, 3, 3}, rng);
  pc.features = filled({1, 3, 2}, rng);
  KeyParams kp = KeyParams::init(2, false, rng);
  kp.residual_bias.data()[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(compute_keys(pc, kp, 3), std::runtime_error);
  pc.positions.data()[0] = std::nan("");
  EXPECT_THROW(pc.validate(), std::invalid_argument);
}

TEST(Keys, GradientMatchesCentralDifferences) {
  Rng rng(72);
  PointCloudBatch pc;
  pc.positions = filled({1, 4, 3}, rng, -1.0, 1.0);
  pc.features = filled({1, 4, 3}, rng, -1.0, 1.0);
  const KeyParams kp = KeyParams::init(3, true, rng);
  Tensor r = filled({1, 4, 3}, rng);
  const double err = fd_check([&] { return sum(mul(compute_keys(pc, kp, 3), r)); },
                              {pc.features, kp.residual_weight, kp.transform_linear, kp.log_scale});
  EXPECT_LT(err, 1e-6);
}
