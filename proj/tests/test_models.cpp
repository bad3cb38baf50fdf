#include <gtest/gtest.h>

#include <cmath>

#include "cloudtf/losses.hpp"
#include "cloudtf/models.hpp"
#include "cloudtf/ops.hpp"
#include "support.hpp"

using namespace cloudtf;
using cloudtf::testing::filled;

namespace {

ModelConfig tiny(Task task) {
  ModelConfig cfg;
  cfg.task = task;
  cfg.g = 8;
  cfg.layout.heads_2d = 1;
  cfg.layout.heads_3d = 1;
  cfg.layout.w2d = 8;
  cfg.layout.w3d = 4;
  cfg.layout.c2d = 4;
  cfg.layout.c3d = 2;
  cfg.mlp_hidden = 8;
  cfg.style_dim = 4;
  cfg.pool.heads_2d = 1;
  cfg.pool.heads_3d = 1;
  cfg.pool.c2d = 2;
  cfg.pool.c3d = 2;
  cfg.pool.out_dim = 8;
  cfg.out_points = 16;
  cfg.in_features = 3;
  cfg.classes = 3;
  return cfg;
}

PointCloudBatch cloud(std::size_t b, std::size_t n, std::size_t f, Rng& rng) {
  PointCloudBatch pc;
  pc.positions = filled({b, n, 3}, rng, -1.0, 1.0);
  pc.features = filled({b, n, f}, rng, -1.0, 1.0);
  return pc;
}

}  // namespace

TEST(Task, NamesRoundTrip) {
  for (Task t : {Task::segment, Task::classify, Task::generate, Task::inpaint}) EXPECT_EQ(parse_task(to_string(t)), t);
  EXPECT_EQ(parse_task("seg"), Task::segment);
  EXPECT_EQ(parse_task("cls"), Task::classify);
  EXPECT_THROW(parse_task("detect"), std::invalid_argument);
}

TEST(Segmenter, EmitsPerPointLogits) {
  Rng rng(1);
  ModelConfig cfg = tiny(Task::segment);
  cfg.in_features = 6;
  cfg.classes = 2;
  Segmenter model(cfg, rng);
  const Tensor logits = model.forward(cloud(2, 20, 6, rng), {true, {}});
  EXPECT_EQ(logits.shape(), (Shape{2, 20, 2}));
  EXPECT_THROW(model.forward(cloud(2, 20, 5, rng), {true, {}}), std::invalid_argument);
}

TEST(Classifier, EmitsClassAndMaskLogits) {
  Rng rng(2);
  Classifier model(tiny(Task::classify), rng);
  const ClassifierOutput out = model.forward(cloud(3, 16, 3, rng), {true, {}});
  EXPECT_EQ(out.class_logits.shape(), (Shape{3, 3}));
  EXPECT_EQ(out.fg_logits.shape(), (Shape{3, 16, 2}));
  EXPECT_EQ(out.class_vector.shape(), (Shape{3, 8}));
  std::vector<int> mask(48, 1);
  const Tensor loss = model.loss(out, {0, 1, 2}, mask);
  EXPECT_TRUE(std::isfinite(loss.item()));
  EXPECT_THROW(model.loss(out, {0, 1}, mask), std::invalid_argument);
}

TEST(Generator, OutputsStayStrictlyInsideUnitBox) {
  Rng rng(3);
  Generator gen(tiny(Task::generate), rng);
  Tensor style = filled({2, 4}, rng, -50.0, 50.0);
  const Tensor pts = gen.forward(style, 40, rng, false);
  ASSERT_EQ(pts.shape(), (Shape{2, 40, 3}));
  for (double v : pts.data()) {
    EXPECT_GT(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_THROW(gen.forward(filled({2, 5}, rng), 8, rng, false), std::invalid_argument);
}

TEST(Generator, GeneratePointsSubsamplesTwoPasses) {
  Rng rng(4);
  Generator gen(tiny(Task::generate), rng);
  const Tensor style = filled({1, 4}, rng);
  EXPECT_EQ(gen.generate_points(style, 16, 24, rng).shape(), (Shape{1, 24, 3}));
  EXPECT_THROW(gen.generate_points(style, 16, 33, rng), std::invalid_argument);
}

TEST(Inpainter, CompletesToRequestedSize) {
  Rng rng(5);
  Inpainter model(tiny(Task::inpaint), rng);
  const Tensor pts = model.forward(cloud(2, 12, 3, rng), 24, rng, true);
  EXPECT_EQ(pts.shape(), (Shape{2, 24, 3}));
}

TEST(ModelConfig, RejectsBadSettings) {
  ModelConfig cfg = tiny(Task::classify);
  cfg.classes = 1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny(Task::segment);
  cfg.layout.heads_2d = cfg.layout.heads_3d = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny(Task::generate);
  cfg.style_dim = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny(Task::segment);
  cfg.n_stages = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(SampleSphere, PointsLieOnUnitSphere) {
  Rng rng(6);
  const Tensor s = sample_sphere(2, 30, rng);
  ASSERT_EQ(s.shape(), (Shape{2, 30, 3}));
  for (std::size_t i = 0; i < 60; ++i) {
    const double* p = s.data().data() + i * 3;
    EXPECT_NEAR(p[0] * p[0] + p[1] * p[1] + p[2] * p[2], 1.0, 1e-12);
  }
}

TEST(Classifier, IsPermutationInvariantInClassLogits) {
  Rng rng(7);
  Classifier model(tiny(Task::classify), rng);
  PointCloudBatch pc = cloud(2, 16, 3, rng);
  PointCloudBatch rev = pc;
  rev.positions = Tensor({2, 16, 3});
  rev.features = Tensor({2, 16, 3});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t d = 0; d < 3; ++d) {
        rev.positions.data()[(b * 16 + i) * 3 + d] = pc.positions.data()[(b * 16 + 15 - i) * 3 + d];
        rev.features.data()[(b * 16 + i) * 3 + d] = pc.features.data()[(b * 16 + 15 - i) * 3 + d];
      }
  NoGradGuard guard;
  const Tensor a = model.forward(pc, {true, {}}).class_logits;
  const Tensor b = model.forward(rev, {true, {}}).class_logits;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-10);
}
