#include <gtest/gtest.h>

#include <cmath>

#include "cloudtf/gridnn.hpp"
#include "cloudtf/ops.hpp"
#include "support.hpp"

using namespace cloudtf;
using namespace cloudtf::nn;
using cloudtf::testing::fd_check;
using cloudtf::testing::filled;
using cloudtf::testing::to_vector;

namespace {

// Direct zero-padded correlation over a [B, D, H, W, c] view (D = 1 in 2D).
std::vector<double> naive_conv(const Tensor& grid, const ConvParams& p) {
  const int dims = p.dims;
  const std::size_t b = grid.size(0);
  const std::size_t d = dims == 3 ? grid.size(1) : 1;
  const std::size_t h = grid.size(dims == 3 ? 2 : 1), w = grid.size(dims == 3 ? 3 : 2);
  const auto k = static_cast<long>(p.kernel), half = k / 2;
  const long kd = dims == 3 ? k : 1, hd = dims == 3 ? half : 0;
  std::vector<double> out(b * d * h * w * p.c_out);
  for (std::size_t s = 0; s < b; ++s)
    for (long z = 0; z < static_cast<long>(d); ++z)
      for (long y = 0; y < static_cast<long>(h); ++y)
        for (long x = 0; x < static_cast<long>(w); ++x)
          for (std::size_t o = 0; o < p.c_out; ++o) {
            double acc = p.bias.data()[o];
            long offset = 0;
            for (long dz = 0; dz < kd; ++dz)
              for (long dy = 0; dy < k; ++dy)
                for (long dx = 0; dx < k; ++dx, ++offset) {
                  const long zz = z + dz - hd, yy = y + dy - half, xx = x + dx - half;
                  if (zz < 0 || yy < 0 || xx < 0 || zz >= static_cast<long>(d) || yy >= static_cast<long>(h) ||
                      xx >= static_cast<long>(w))
                    continue;
                  const std::size_t in_base = (((s * d + zz) * h + yy) * w + xx) * p.c_in;
                  for (std::size_t i = 0; i < p.c_in; ++i)
                    acc += grid.data()[in_base + i] * p.weight.data()[(offset * p.c_in + i) * p.c_out + o];
                }
            out[(((s * d + z) * h + y) * w + x) * p.c_out + o] = acc;
          }
  return out;
}

}  // namespace

class ConvOracle : public ::testing::TestWithParam<std::tuple<int, std::size_t>> {};

TEST_P(ConvOracle, MatchesDirectCorrelation) {
  const auto [dims, kernel] = GetParam();
  Rng rng(1 + dims + kernel);
  const Shape shape = dims == 2 ? Shape{2, 5, 4, 3} : Shape{2, 3, 4, 5, 3};
  Tensor grid = filled(shape, rng);
  ConvParams p = ConvParams::init(dims, 3, 2, kernel, rng);
  for (double& v : p.bias.data()) v = uniform(rng, -1.0, 1.0);
  const Tensor out = conv_same(grid, p);
  Shape expect_shape = shape;
  expect_shape.back() = 2;
  ASSERT_EQ(out.shape(), expect_shape);
  const auto expect = naive_conv(grid, p);
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(out.data()[i], expect[i], 1e-12);
}

INSTANTIATE_TEST_SUITE_P(All, ConvOracle,
                         ::testing::Combine(::testing::Values(2, 3), ::testing::Values(std::size_t{1}, std::size_t{3})));

TEST(Conv, IdentityKernelIsIdentity) {
  Rng rng(2);
  for (int dims : {2, 3}) {
    Tensor grid = filled(dims == 2 ? Shape{1, 4, 4, 3} : Shape{1, 3, 3, 3, 3}, rng);
    EXPECT_EQ(to_vector(conv_same(grid, ConvParams::identity(dims, 3))), to_vector(grid));
  }
}

TEST(Conv, GradientMatchesCentralDifferences) {
  Rng rng(3);
  for (int dims : {2, 3}) {
    Tensor grid = filled(dims == 2 ? Shape{2, 4, 3, 2} : Shape{1, 3, 3, 3, 2}, rng);
    ConvParams p = ConvParams::init(dims, 2, 3, 3, rng);
    Shape rs = grid.shape();
    rs.back() = 3;
    Tensor r = filled(rs, rng);
    EXPECT_LT(fd_check([&] { return sum(mul(conv_same(grid, p), r)); }, {grid, p.weight, p.bias}), 1e-6) << dims;
  }
}

TEST(Conv, RejectsChannelMismatch) {
  Rng rng(4);
  ConvParams p = ConvParams::init(2, 3, 2, 3, rng);
  EXPECT_THROW(conv_same(Tensor({1, 4, 4, 2}), p), std::invalid_argument);
  EXPECT_THROW(conv_same(Tensor({1, 4, 4, 4, 3}), p), std::invalid_argument);
}

TEST(Norm, BatchTrainingStandardizesEachChannel) {
  Rng rng(5);
  Tensor x = filled({3, 4, 4, 2}, rng, -3.0, 5.0);
  NormParams p = NormParams::init(NormKind::batch, 2);
  p.scale.data()[1] = 2.0;
  p.shift.data()[1] = -1.0;
  const Tensor y = normalize(x, p, true);
  for (std::size_t ch = 0; ch < 2; ++ch) {
    double m = 0, m2 = 0, xm = 0, xv = 0;
    const std::size_t n = 48;
    for (std::size_t i = 0; i < n; ++i) xm += x.data()[i * 2 + ch] / n;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = y.data()[i * 2 + ch];
      m += v / n;
      m2 += v * v / n;
      xv += std::pow(x.data()[i * 2 + ch] - xm, 2) / n;
    }
    const double gamma = ch == 1 ? 2.0 : 1.0, beta = ch == 1 ? -1.0 : 0.0;
    EXPECT_NEAR(m, beta, 1e-12);
    EXPECT_NEAR(m2 - m * m, gamma * gamma * xv / (xv + p.eps), 1e-9);
    // Running statistics move toward the batch statistics.
    EXPECT_NEAR(p.running_mean.data()[ch], (1 - p.momentum) * xm, 1e-12);
    EXPECT_NEAR(p.running_var.data()[ch], p.momentum + (1 - p.momentum) * xv, 1e-12);
  }
}

TEST(Norm, BatchEvalUsesRunningStatistics) {
  NormParams p = NormParams::init(NormKind::batch, 1);
  p.running_mean.data()[0] = 2.0;
  p.running_var.data()[0] = 4.0;
  const Tensor y = normalize(Tensor({1, 2, 1, 1}, {2.0, 6.0}), p, false);
  EXPECT_NEAR(y.data()[0], 0.0, 1e-12);
  EXPECT_NEAR(y.data()[1], 4.0 / std::sqrt(4.0 + p.eps), 1e-12);
  EXPECT_EQ(p.running_mean.data()[0], 2.0);
}

TEST(Norm, InstanceStandardizesEachSampleSeparately) {
  Rng rng(6);
  Tensor x = filled({2, 3, 3, 3, 2}, rng);
  for (std::size_t i = 0; i < 54; ++i) x.data()[54 + i] += 10.0;
  NormParams p = NormParams::init(NormKind::instance, 2);
  const Tensor y = normalize(x, p, true);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t ch = 0; ch < 2; ++ch) {
      double m = 0;
      for (std::size_t i = 0; i < 27; ++i) m += y.data()[b * 54 + i * 2 + ch] / 27;
      EXPECT_NEAR(m, 0.0, 1e-12);
    }
}

TEST(Norm, AdaptiveTakesAffineFromStyle) {
  Rng rng(7);
  Tensor x = filled({2, 3, 3, 2}, rng);
  NormParams p = NormParams::init(NormKind::adaptive_instance, 2);
  Tensor style({2, 4}, {1, 1, 0, 0, 3, -1, 0.5, 2});
  const Tensor y = normalize(x, p, true, style);
  NormParams plain = NormParams::init(NormKind::instance, 2);
  const Tensor z = normalize(x, plain, true);
  for (std::size_t i = 0; i < 18; ++i) EXPECT_NEAR(y.data()[i], z.data()[i], 1e-12);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_NEAR(y.data()[18 + i * 2], 3 * z.data()[18 + i * 2] + 0.5, 1e-12);
    EXPECT_NEAR(y.data()[18 + i * 2 + 1], -z.data()[18 + i * 2 + 1] + 2, 1e-12);
  }
  EXPECT_THROW(normalize(x, p, true), std::invalid_argument);
}

TEST(Norm, GradientsMatchCentralDifferences) {
  Rng rng(8);
  for (NormKind kind : {NormKind::batch, NormKind::instance, NormKind::adaptive_instance}) {
    Tensor x = filled({2, 3, 3, 2}, rng);
    NormParams p = NormParams::init(kind, 2);
    Tensor style = filled({2, 4}, rng);
    Tensor r = filled({2, 3, 3, 2}, rng);
    std::vector<Tensor> inputs{x};
    if (kind == NormKind::adaptive_instance) {
      inputs.push_back(style);
    } else {
      inputs.push_back(p.scale);
      inputs.push_back(p.shift);
    }
    NormParams work = p;
    const double err = fd_check(
        [&] {
          work.running_mean = p.running_mean.clone();
          work.running_var = p.running_var.clone();
          return sum(mul(normalize(x, work, true, kind == NormKind::adaptive_instance ? style : Tensor{}), r));
        },
        inputs);
    EXPECT_LT(err, 1e-6) << to_string(kind);
  }
}

TEST(Norm, KindNamesRoundTrip) {
  for (NormKind kind : {NormKind::batch, NormKind::instance, NormKind::adaptive_instance})
    EXPECT_EQ(parse_norm_kind(to_string(kind)), kind);
  EXPECT_THROW(parse_norm_kind("layer"), std::invalid_argument);
}

TEST(Pool, MaxPoolMatchesWindows) {
  Rng rng(9);
  Tensor x = filled({2, 5, 4, 3}, rng);  // odd height is floored
  const Tensor y = max_pool(x);
  ASSERT_EQ(y.shape(), (Shape{2, 2, 2, 3}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t c = 0; c < 3; ++c) {
          double m = -1e300;
          for (std::size_t di = 0; di < 2; ++di)
            for (std::size_t dj = 0; dj < 2; ++dj)
              m = std::max(m, x.data()[((b * 5 + 2 * i + di) * 4 + 2 * j + dj) * 3 + c]);
          EXPECT_EQ(y.data()[((b * 2 + i) * 2 + j) * 3 + c], m);
        }
  EXPECT_EQ(max_pool(Tensor({1, 4, 6, 2, 1})).shape(), (Shape{1, 2, 3, 1, 1}));
  EXPECT_THROW(max_pool(Tensor({1, 1, 4, 2})), std::invalid_argument);
  EXPECT_THROW(max_pool(Tensor({4, 2})), std::invalid_argument);
}

TEST(Pool, GlobalAverageAndGradients) {
  Rng rng(10);
  Tensor x = filled({2, 2, 2, 2, 3}, rng);
  const Tensor y = avg_pool_global(x);
  ASSERT_EQ(y.shape(), (Shape{2, 3}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0;
      for (std::size_t i = 0; i < 8; ++i) m += x.data()[(b * 8 + i) * 3 + c] / 8;
      EXPECT_NEAR(y.data()[b * 3 + c], m, 1e-12);
    }
  Tensor r = filled({2, 3}, rng);
  EXPECT_LT(fd_check([&] { return sum(mul(avg_pool_global(x), r)); }, {x}), 1e-6);
  Tensor g = filled({1, 4, 4, 2}, rng);
  Tensor rp = filled({1, 2, 2, 2}, rng);
  EXPECT_LT(fd_check([&] { return sum(mul(max_pool(g), rp)); }, {g}), 1e-6);
}

TEST(Dense, MatchesAffineOnLastAxis) {
  Rng rng(11);
  Dense layer(4, 2, rng);
  Tensor x = filled({3, 5, 4}, rng);
  const Tensor y = layer.forward(x);
  ASSERT_EQ(y.shape(), (Shape{3, 5, 2}));
  EXPECT_EQ(to_vector(y), to_vector(affine(x, layer.weight(), layer.bias())));
  EXPECT_THROW(layer.forward(filled({2, 3}, rng)), std::invalid_argument);
  EXPECT_EQ(layer.parameters().scalar_count(), 10u);
}

TEST(ResBlock, ProjectsOnlyWhenWidthChanges) {
  Rng rng(12);
  ResBlock same(2, 4, 4, rng), wider(3, 2, 5, rng);
  EXPECT_FALSE(same.has_projection());
  EXPECT_TRUE(wider.has_projection());
  ForwardContext ctx;
  const Tensor y = wider.forward(filled({2, 4, 4, 4, 2}, rng), ctx);
  EXPECT_EQ(y.shape(), (Shape{2, 4, 4, 4, 5}));
  for (double v : y.data()) EXPECT_GE(v, 0.0);
}

TEST(MiniCnn, ReducesGridToChannelVector) {
  Rng rng(13);
  MiniCnn cnn(2, {3, 4, 5, 6}, rng);
  ForwardContext ctx;
  EXPECT_EQ(cnn.forward(filled({2, 8, 8, 3}, rng), ctx).shape(), (Shape{2, 6}));
  EXPECT_EQ(cnn.out_dim(), 6u);
  EXPECT_THROW(cnn.forward(filled({2, 2, 2, 3}, rng), ctx), std::invalid_argument);
  EXPECT_THROW(MiniCnn(2, {3, 4}, rng), std::invalid_argument);
}
