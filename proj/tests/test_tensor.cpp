#include <gtest/gtest.h>

#include <cmath>

#include "cloudtf/ops.hpp"
#include "support.hpp"

using namespace cloudtf;
using cloudtf::testing::fd_check;
using cloudtf::testing::filled;
using cloudtf::testing::to_vector;

TEST(Tensor, ShapeAndStorage) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.size(1), 3u);
  Tensor alias = t;
  alias.data()[0] = 9.0;
  EXPECT_EQ(t.data()[0], 9.0);
  Tensor deep = t.clone();
  deep.data()[0] = -1.0;
  EXPECT_EQ(t.data()[0], 9.0);
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), std::invalid_argument);
  EXPECT_THROW(t.item(), std::logic_error);
  EXPECT_EQ(shape_str({2, 3}), "[2,3]");
}

TEST(Ops, ForwardValues) {
  Tensor a({2, 2}, {1, -2, 3, -4});
  Tensor b({2}, {10, 20});
  EXPECT_EQ(to_vector(add(a, b)), (std::vector<double>{11, 18, 13, 16}));
  EXPECT_EQ(to_vector(sub(a, a)), (std::vector<double>{0, 0, 0, 0}));
  EXPECT_EQ(to_vector(mul(a, b)), (std::vector<double>{10, -40, 30, -80}));
  EXPECT_EQ(to_vector(relu(a)), (std::vector<double>{1, 0, 3, 0}));
  EXPECT_EQ(to_vector(matmul(a, Tensor({2, 1}, {1, 1}))), (std::vector<double>{-1, -1}));
  EXPECT_EQ(sum(a).item(), -2.0);
  EXPECT_EQ(mean(a).item(), -0.5);
  EXPECT_EQ(max_reduce(a).item(), 3.0);
  EXPECT_EQ(to_vector(max_reduce(a, 0)), (std::vector<double>{3, -2}));
  EXPECT_EQ(to_vector(sum_axis(a, 1)), (std::vector<double>{-1, -1}));
  EXPECT_EQ(to_vector(slice(a, 1, 1, 2)), (std::vector<double>{-2, -4}));
  EXPECT_EQ(to_vector(concat({a, a}, 1)), (std::vector<double>{1, -2, 1, -2, 3, -4, 3, -4}));
  EXPECT_EQ(repeat_axis(b, 0, 3).shape(), (Shape{3, 2}));
  EXPECT_NEAR(sigmoid(Tensor::scalar(0.0)).item(), 0.5, 1e-15);
  EXPECT_NEAR(tanh(Tensor::scalar(0.5)).item(), std::tanh(0.5), 1e-15);
  EXPECT_NEAR(exp(Tensor::scalar(1.0)).item(), std::exp(1.0), 1e-15);
}

TEST(Ops, AffineMatchesLoop) {
  Rng rng(3);
  Tensor x = filled({2, 3, 4}, rng), w = filled({4, 5}, rng), b = filled({5}, rng);
  Tensor y = affine(x, w, b);
  ASSERT_EQ(y.shape(), (Shape{2, 3, 5}));
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t o = 0; o < 5; ++o) {
      double acc = b.data()[o];
      for (std::size_t i = 0; i < 4; ++i) acc += x.data()[r * 4 + i] * w.data()[i * 5 + o];
      EXPECT_NEAR(y.data()[r * 5 + o], acc, 1e-12);
    }
}

TEST(Ops, ShapeErrorsNameTheOperands) {
  Tensor a({2, 3}), b({4});
  try {
    add(a, b);
    FAIL() << "expected a shape error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4]"), std::string::npos);
  }
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), std::invalid_argument);
  EXPECT_THROW(reshape(a, {4, 2}), std::invalid_argument);
  EXPECT_THROW(slice(a, 1, 2, 1), std::invalid_argument);
  EXPECT_THROW(max_reduce(a, 2), std::invalid_argument);
}

TEST(Ops, MaxTiesGoToLowestIndex) {
  Tensor x({4}, {1, 3, 3, 0}, true);
  backward(max_reduce(x));
  EXPECT_EQ(to_vector(Tensor({4}, {x.grad().begin(), x.grad().end()})), (std::vector<double>{0, 1, 0, 0}));
}

struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  std::function<Tensor(const std::vector<Tensor>&)> f;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const OpCase& c = GetParam();
  Rng rng(11);
  std::vector<Tensor> in;
  for (const auto& s : c.shapes) in.push_back(filled(s, rng));
  Tensor r;
  {
    NoGradGuard g;
    r = filled(c.f(in).shape(), rng, -1.0, 1.0);
  }
  // Keep relu and max inputs away from their kinks.
  for (auto& t : in)
    for (double& v : t.data())
      if (std::abs(v) < 1e-2) v += 0.1;
  const double err = fd_check([&] { return sum(mul(c.f(in), r)); }, in);
  EXPECT_LT(err, 1e-6) << c.name;
}

INSTANTIATE_TEST_SUITE_P(
    All, OpGradient,
    ::testing::Values(
        OpCase{"add", {{3, 2}, {2}}, [](const auto& x) { return add(x[0], x[1]); }},
        OpCase{"sub", {{3, 2}, {3, 2}}, [](const auto& x) { return sub(x[0], x[1]); }},
        OpCase{"mul", {{3, 2}, {2}}, [](const auto& x) { return mul(x[0], x[1]); }},
        OpCase{"scale", {{4}}, [](const auto& x) { return scale(x[0], 0.3); }},
        OpCase{"matmul", {{2, 3}, {3, 4}}, [](const auto& x) { return matmul(x[0], x[1]); }},
        OpCase{"affine", {{2, 2, 3}, {3, 2}, {2}}, [](const auto& x) { return affine(x[0], x[1], x[2]); }},
        OpCase{"relu", {{8}}, [](const auto& x) { return relu(x[0]); }},
        OpCase{"sigmoid", {{5}}, [](const auto& x) { return sigmoid(x[0]); }},
        OpCase{"tanh", {{5}}, [](const auto& x) { return tanh(x[0]); }},
        OpCase{"exp", {{5}}, [](const auto& x) { return exp(x[0]); }},
        OpCase{"mean", {{2, 3}}, [](const auto& x) { return mean(x[0]); }},
        OpCase{"max_axis", {{2, 5, 2}}, [](const auto& x) { return max_reduce(x[0], 1); }},
        OpCase{"sum_axis", {{2, 5, 2}}, [](const auto& x) { return sum_axis(x[0], 2); }},
        OpCase{"concat", {{2, 1}, {2, 3}}, [](const auto& x) { return concat({x[0], x[1]}, 1); }},
        OpCase{"slice", {{5, 2}}, [](const auto& x) { return slice(x[0], 0, 1, 4); }},
        OpCase{"repeat", {{2, 3}}, [](const auto& x) { return repeat_axis(x[0], 1, 3); }},
        OpCase{"chain", {{3, 3}, {3, 3}},
               [](const auto& x) { return tanh(matmul(sigmoid(x[0]), exp(scale(x[1], 0.2)))); }}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(Tape, IntermediateGradsKeptAndTapeCleared) {
  Tensor x({2}, {1.0, 2.0}, true);
  Tensor y = mul(x, x);
  Tensor l = sum(y);
  EXPECT_EQ(Tape::active().size(), 2u);
  backward(l);
  EXPECT_EQ(Tape::active().size(), 0u);
  EXPECT_EQ(to_vector(Tensor({2}, {y.grad().begin(), y.grad().end()})), (std::vector<double>{1, 1}));
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Tape, GradientsAccumulateUntilZeroed) {
  Tensor x = Tensor::scalar(3.0, true);
  backward(mul(x, x));
  backward(mul(x, x));
  EXPECT_EQ(x.grad()[0], 12.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad() && x.grad()[0] != 0.0);
}

TEST(Tape, NoGradRecordsNothing) {
  Tensor x = Tensor::scalar(2.0, true);
  {
    NoGradGuard g;
    Tensor y = mul(x, x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_EQ(Tape::active().size(), 0u);
  }
  EXPECT_TRUE(grad_enabled());
}

TEST(Tape, BackwardRejectsBadLoss) {
  EXPECT_THROW(backward(Tensor({2}, {1, 2}, true)), std::invalid_argument);
  EXPECT_THROW(backward(Tensor::scalar(1.0)), std::invalid_argument);
}

TEST(Tape, CustomNode) {
  Tensor x({3}, {1, 2, 3}, true);
  Tensor y = custom_node(
      "cube", {x},
      [](const std::vector<Tensor>& in) {
        Tensor out(in[0].shape());
        for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = std::pow(in[0].data()[i], 3);
        return out;
      },
      [x](std::span<const double> g) {
        std::vector<double> gx(3);
        for (std::size_t i = 0; i < 3; ++i) gx[i] = 3.0 * x.data()[i] * x.data()[i] * g[i];
        return std::vector<std::vector<double>>{gx};
      });
  backward(sum(y));
  EXPECT_EQ(x.grad()[2], 27.0);
}

TEST(Tape, KinkScopeTracksNearestKink) {
  KinkScope scope;
  relu(Tensor({3}, {0.5, -0.02, 1.0}));
  EXPECT_NEAR(scope.min_margin(), 0.02, 1e-15);
  const auto sig = scope.signature();
  relu(Tensor({1}, std::vector<double>{1.0}));
  EXPECT_NE(scope.signature(), sig);
}

TEST(Ops, ForwardOpDispatch) {
  Tensor a({2}, {1, 2}), b({2}, {3, 4});
  EXPECT_EQ(to_vector(forward_op(OpKind::add, {a, b})), (std::vector<double>{4, 6}));
  OpAttrs attrs;
  attrs.axis = 0;
  attrs.count = 2;
  EXPECT_EQ(forward_op(OpKind::repeat, {a}, attrs).shape(), (Shape{2, 2}));
  EXPECT_THROW(forward_op(OpKind::mul, {a}), std::invalid_argument);
}
