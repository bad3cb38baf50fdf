#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "cloudtf/blocks.hpp"
#include "cloudtf/ops.hpp"
#include "support.hpp"

using namespace cloudtf;
using cloudtf::testing::filled;
using cloudtf::testing::to_vector;

namespace {

PointCloudBatch random_cloud(std::size_t b, std::size_t n, std::size_t f, Rng& rng) {
  PointCloudBatch pc;
  pc.positions = filled({b, n, 3}, rng, -1.0, 1.0);
  pc.features = filled({b, n, f}, rng, -1.0, 1.0);
  return pc;
}

// Applies the same point permutation to every sample of a [B, N, c] tensor.
Tensor permute_points(const Tensor& t, const std::vector<std::size_t>& perm) {
  const std::size_t b = t.size(0), n = t.size(1), c = t.size(2);
  Tensor out({b, n, c});
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) out.data()[(s * n + i) * c + ch] = t.data()[(s * n + perm[i]) * c + ch];
  return out;
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

BlockConfig small_block(raster::Aggregation agg, nn::NormKind norm = nn::NormKind::batch) {
  HeadLayout layout;
  layout.heads_2d = 2;
  layout.heads_3d = 1;
  layout.w2d = 8;
  layout.w3d = 4;
  layout.c2d = 4;
  layout.c3d = 3;
  layout.aggregation = agg;
  return cascade_configs(layout, 6, norm, true, norm == nn::NormKind::adaptive_instance ? 3 : 0).front();
}

void expect_close(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a.data()[i], b.data()[i], tol) << i;
}

}  // namespace

class MhctPermutation : public ::testing::TestWithParam<raster::Aggregation> {};

TEST_P(MhctPermutation, IsPointPermutationEquivariant) {
  Rng rng(1);
  MhctBlock block(small_block(GetParam()), rng);
  const PointCloudBatch pc = random_cloud(2, 24, 6, rng);
  const auto perm = shuffled(24, rng);
  PointCloudBatch permuted = pc;
  permuted.positions = permute_points(pc.positions, perm);
  permuted.features = permute_points(pc.features, perm);
  NoGradGuard guard;
  const Tensor out = block.forward(pc, {true, {}}).features;
  const Tensor out_p = block.forward(permuted, {true, {}}).features;
  expect_close(permute_points(out, perm), out_p, 1e-10);
}

INSTANTIATE_TEST_SUITE_P(All, MhctPermutation,
                         ::testing::Values(raster::Aggregation::max, raster::Aggregation::sum, raster::Aggregation::mean),
                         [](const auto& info) { return raster::to_string(info.param); });

TEST(CloudPool, IsPointPermutationInvariant) {
  Rng rng(2);
  PoolConfig cfg;
  cfg.heads_2d = 1;
  cfg.heads_3d = 1;
  cfg.c2d = 3;
  cfg.c3d = 3;
  cfg.out_dim = 5;
  CloudPool pool(cfg, 6, rng);
  const PointCloudBatch pc = random_cloud(2, 20, 6, rng);
  const auto perm = shuffled(20, rng);
  PointCloudBatch permuted = pc;
  permuted.positions = permute_points(pc.positions, perm);
  permuted.features = permute_points(pc.features, perm);
  NoGradGuard guard;
  const Tensor a = pool.forward(pc, {true, {}});
  ASSERT_EQ(a.shape(), (Shape{2, 5}));
  expect_close(a, pool.forward(permuted, {true, {}}), 1e-10);
}

TEST(Mhct, ZeroedBranchIsResidualIdentity) {
  Rng rng(3);
  MhctBlock block(small_block(raster::Aggregation::max), rng);
  for (auto& head : block.heads()) {
    for (double& v : head.lift().weight().data()) v = 0.0;
    for (double& v : head.lift().bias().data()) v = 0.0;
  }
  const PointCloudBatch pc = random_cloud(2, 16, 6, rng);
  for (bool training : {true, false}) {
    const Tensor out = block.forward(pc, {training, {}}).features;
    EXPECT_EQ(to_vector(out), to_vector(pc.features));
  }
}

TEST(Mhct, HeadSumIsSumOfHeads) {
  Rng rng(4);
  MhctBlock block(small_block(raster::Aggregation::mean), rng);
  const PointCloudBatch pc = random_cloud(1, 10, 6, rng);
  NoGradGuard guard;
  const Tensor total = block.head_sum(pc, {false, {}});
  Tensor expect({1, 10, 6});
  for (auto& head : block.heads()) expect = add(expect, head.forward(pc, {false, {}}));
  expect_close(total, expect, 1e-12);
}

TEST(Mhct, AdaptiveNormNeedsStyle) {
  Rng rng(5);
  MhctBlock block(small_block(raster::Aggregation::max, nn::NormKind::adaptive_instance), rng);
  const PointCloudBatch pc = random_cloud(2, 12, 6, rng);
  EXPECT_THROW(block.forward(pc, {true, {}}), std::invalid_argument);
  EXPECT_EQ(block.forward(pc, {true, filled({2, 3}, rng)}).features.shape(), (Shape{2, 12, 6}));
}

TEST(Cascade, HalvesGridsAndDoublesChannels) {
  HeadLayout layout;
  layout.heads_2d = 1;
  layout.heads_3d = 1;
  const auto stage = cascade_configs(layout, 32, nn::NormKind::batch, true, 0);
  ASSERT_EQ(stage.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(stage[i].heads[0].w, layout.w2d >> i);
    EXPECT_EQ(stage[i].heads[0].channels, layout.c2d << i);
    EXPECT_EQ(stage[i].heads[1].dims, 3);
    EXPECT_EQ(stage[i].heads[1].w, layout.w3d >> i);
  }
  Rng rng(6);
  Cmhct cmhct(stage, rng);
  EXPECT_EQ(cmhct.blocks().size(), 3u);
}

TEST(Config, InvalidSettingsAreRejected) {
  HeadConfig head;
  head.dims = 4;
  EXPECT_THROW(head.validate(), std::invalid_argument);
  head.dims = 2;
  head.w = 1;
  EXPECT_THROW(head.validate(), std::invalid_argument);
  BlockConfig block;
  EXPECT_THROW(block.validate(), std::invalid_argument);
  block.heads.push_back(HeadConfig{});
  block.norm_kind = nn::NormKind::adaptive_instance;
  EXPECT_THROW(block.validate(), std::invalid_argument);
  PoolConfig pool;
  pool.w2d = 2;
  EXPECT_THROW(pool.validate(), std::invalid_argument);
  EXPECT_THROW(parse_key_mode("learned"), std::invalid_argument);
  for (KeyMode m : {KeyMode::residual_se3, KeyMode::linear, KeyMode::fixed_random})
    EXPECT_EQ(parse_key_mode(to_string(m)), m);
}

TEST(KeyPredictor, ModesProduceUnitKeysAndFixedModeHasNoParameters) {
  Rng rng(7);
  const PointCloudBatch pc = random_cloud(2, 9, 5, rng);
  for (KeyMode m : {KeyMode::residual_se3, KeyMode::linear, KeyMode::fixed_random}) {
    KeyPredictor kp(m, 5, 3, false, rng);
    const Tensor k = kp.forward(pc, {true, {}});
    ASSERT_EQ(k.shape(), (Shape{2, 9, 3}));
    for (double v : k.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    if (m == KeyMode::fixed_random) EXPECT_EQ(kp.parameters().scalar_count(), 0u);
  }
}

TEST(Head, KeyGradientIsBalancedByGridSize) {
  // With balancing on, the key cotangent from the single consuming raster
  // site shrinks by exactly 1/w relative to the unbalanced run.
  Rng rng(8);
  HeadConfig cfg;
  cfg.w = 8;
  cfg.channels = 3;
  cfg.aggregation = raster::Aggregation::sum;
  const PointCloudBatch pc = random_cloud(1, 6, 4, rng);
  Rng init_a(9), init_b(9);
  CloudTransformHead on(cfg, 4, nn::NormKind::instance, 0, true, init_a);
  CloudTransformHead off(cfg, 4, nn::NormKind::instance, 0, false, init_b);
  Tensor r = filled({1, 6, 4}, rng);
  backward(sum(mul(on.forward(pc, {true, {}}), r)));
  backward(sum(mul(off.forward(pc, {true, {}}), r)));
  const auto& ga = on.last_keys().grad();
  const auto& gb = off.last_keys().grad();
  ASSERT_EQ(ga.size(), gb.size());
  // Keys feed both rasterize and derasterize, so the total is the sum of two
  // balanced cotangents; each is scaled by 1/w, and so is the sum.
  for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_NEAR(ga[i], gb[i] / 8.0, 1e-12 * (1 + std::abs(gb[i])));
}
