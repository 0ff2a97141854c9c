#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "pdse/gradcheck.hpp"
#include "pdse/ops.hpp"

using namespace pdse;
using pdse::testing::max_abs_diff;
using pdse::testing::random_tensor;

TEST(Tensor, ShapeMustMatchValueCount) {
  EXPECT_THROW(Tensor({2, 2}, {1.f, 2.f, 3.f}), ShapeError);
  EXPECT_THROW(Tensor({0, 2}, {}), ShapeError);
  Tensor t({2, 3}, std::vector<float>(6, 1.f));
  EXPECT_EQ(t.numel(), 6);
  EXPECT_FALSE(t.has_grad());
}

TEST(Tensor, SerializationRoundTripIsBitExact) {
  Rng rng(7);
  const auto t = random_tensor<float>(rng, {2, 3, 4});
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.substr(0, 6), "PDSET1");
  ASSERT_EQ(bytes.size(), 6 + 4 + 3 * 4 + 24 * 4);
  const auto back = read_tensor<float>(ss);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_TRUE(std::equal(back.data().begin(), back.data().end(), t.data().begin()));

  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_tensor<float>(truncated), std::runtime_error);
}

TEST(Primitives, SigmoidOfZeroIsHalf) {
  EXPECT_EQ(ops::sigmoid(Tensor::scalar(0.f)).item(), 0.5f);
  // Large magnitudes stay finite.
  const auto s = ops::sigmoid(Tensor64({2}, {-800.0, 800.0}));
  EXPECT_EQ(s.data()[0], 0.0);
  EXPECT_EQ(s.data()[1], 1.0);
}

TEST(Primitives, GlobalAvgPoolIsMean) {
  const auto out = ops::global_avg_pool(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(out.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(out.item(), 2.5f);
}

TEST(Primitives, NearestUpsampleReplicates) {
  const auto out = ops::upsample_nearest2x(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
  const std::vector<float> expected{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  EXPECT_EQ(out.shape(), (Shape{1, 1, 4, 4}));
  EXPECT_TRUE(std::equal(expected.begin(), expected.end(), out.data().begin()));
}

TEST(Primitives, ShapeErrorsNameOpAndShapes) {
  try {
    ops::add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[3x2]"), std::string::npos);
  }
  EXPECT_THROW(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Primitives, ConcatAlongChannels) {
  const auto a = Tensor({1, 1, 1, 2}, {1, 2});
  const auto b = Tensor({1, 2, 1, 2}, {3, 4, 5, 6});
  const auto c = ops::concat_channels<float>({a, b});
  EXPECT_EQ(c.shape(), (Shape{1, 3, 1, 2}));
  const std::vector<float> expected{1, 2, 3, 4, 5, 6};
  EXPECT_TRUE(std::equal(expected.begin(), expected.end(), c.data().begin()));
}

TEST(Primitives, MaxPoolPicksFirstMaximum) {
  const auto x = Tensor({1, 1, 2, 2}, {1, 5, 5, 2}, true);
  auto y = ops::max_pool2d(x, 2, 2);
  EXPECT_EQ(y.item(), 5.f);
  ops::sum(y).backward();
  EXPECT_EQ(x.grad()[1], 1.f);
  EXPECT_EQ(x.grad()[2], 0.f);
}

TEST(Primitives, BatchNormTrainingNormalizesAndTracksStatistics) {
  ops::BatchNormState<double> state{Tensor64::zeros({1}), Tensor64::full({1}, 1.0)};
  const auto x = Tensor64({2, 1, 1, 2}, {1, 2, 3, 4});
  const auto y = ops::batch_norm(x, Tensor64::full({1}, 1.0), Tensor64::zeros({1}), state, true);
  double mean = 0;
  for (double v : y.data()) mean += v;
  EXPECT_NEAR(mean, 0.0, 1e-12);
  EXPECT_NEAR(state.running_mean.data()[0], 0.1 * 2.5, 1e-12);
  EXPECT_NEAR(state.running_var.data()[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);
  // Eval mode is a fixed affine map.
  const auto e = ops::batch_norm(x, Tensor64::full({1}, 2.0), Tensor64::full({1}, 1.0), state, false);
  EXPECT_NEAR(e.data()[0], 2.0 * (1.0 - 0.25) / std::sqrt(state.running_var.data()[0] + 1e-5) + 1.0, 1e-12);
}

TEST(Conv2d, OnesKernelCountsOverlappedTaps) {
  const auto out = ops::conv2d(Tensor::full({1, 1, 3, 3}, 1.f), Tensor::full({1, 1, 3, 3}, 1.f), Tensor{}, {1, 1});
  EXPECT_EQ(out.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_EQ(out.at({0, 0, 1, 1}), 9.f);
  EXPECT_EQ(out.at({0, 0, 0, 0}), 4.f);
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(3);
  const auto x = random_tensor<float>(rng, {1, 1, 5, 5});
  const auto out = ops::conv2d(x, Tensor::full({1, 1, 1, 1}, 1.f), Tensor::zeros({1}));
  EXPECT_TRUE(std::equal(out.data().begin(), out.data().end(), x.data().begin()));
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  Rng rng(11);
  for (int stride : {1, 2}) {
    const auto x = random_tensor<float>(rng, {2, 3, 8, 8});
    const auto w = random_tensor<float>(rng, {4, 3, 3, 3});
    const auto b = random_tensor<float>(rng, {4});
    const auto out = ops::conv2d(x, w, b, {stride, 1});
    const auto ref = pdse::testing::naive_conv2d(x, w, std::vector<double>(b.data().begin(), b.data().end()), stride, 1);
    ASSERT_EQ(out.numel(), static_cast<std::int64_t>(ref.size()));
    EXPECT_LT(max_abs_diff(out.data(), ref), 1e-5) << "stride " << stride;
  }
  // The 1e-6 tolerance applies at 64-bit.
  const auto x = random_tensor<double>(rng, {2, 3, 8, 8});
  const auto w = random_tensor<double>(rng, {5, 3, 3, 3});
  const auto out = ops::conv2d(x, w, Tensor64{}, {1, 1});
  EXPECT_LT(max_abs_diff(out.data(), pdse::testing::naive_conv2d(x, w, {}, 1, 1)), 1e-6);
}

TEST(Conv2d, OutputExtentAndErrors) {
  const auto out = ops::conv2d(Tensor::zeros({1, 2, 7, 9}), Tensor::zeros({3, 2, 3, 3}), Tensor{}, {2, 1});
  EXPECT_EQ(out.shape(), (Shape{1, 3, 4, 5}));
  EXPECT_THROW(ops::conv2d(Tensor::zeros({1, 2, 5, 5}), Tensor::zeros({3, 4, 3, 3}), Tensor{}), ShapeError);
  EXPECT_THROW(ops::conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), Tensor{}), ShapeError);
  EXPECT_THROW(ops::conv2d(Tensor::zeros({1, 1, 5, 5}), Tensor::zeros({1, 1, 2, 2}), Tensor{}), ShapeError);
}

TEST(Conv2d, IsLinear) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = random_tensor<double>(rng, {1, 2, 6, 6});
    const auto y = random_tensor<double>(rng, {1, 2, 6, 6});
    const auto w = random_tensor<double>(rng, {3, 2, 3, 3});
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    const auto lhs = ops::conv2d(ops::add(ops::scale(x, a), ops::scale(y, b)), w, Tensor64{}, {1, 1});
    const auto rhs = ops::add(ops::scale(ops::conv2d(x, w, Tensor64{}, {1, 1}), a),
                              ops::scale(ops::conv2d(y, w, Tensor64{}, {1, 1}), b));
    EXPECT_LT(max_abs_diff(lhs.data(), rhs.data()), 1e-6);
  }
}

TEST(Autograd, SquareSumGradient) {
  const Tensor64 x({3}, {1, 2, 3}, true);
  ops::sum(ops::mul(x, x)).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Autograd, IndependentParameterGetsZeroGradient) {
  const Tensor64 x({2}, {1, 2}, true);
  Tensor64 p({2}, {5, 6}, true);
  const auto loss = ops::add(ops::sum(x), ops::scale(ops::sum(p), 0.0));
  loss.backward();
  EXPECT_EQ(p.grad()[0], 0.0);
  EXPECT_EQ(p.grad()[1], 0.0);
}

TEST(Autograd, GradientsAccumulateAcrossBackwardCalls) {
  const Tensor64 x({2}, {1.5, -2}, true);
  ops::sum(ops::mul(x, x)).backward();
  ops::sum(ops::scale(x, 3.0)).backward();
  EXPECT_EQ(x.grad()[0], 2 * 1.5 + 3.0);
  EXPECT_EQ(x.grad()[1], 2 * -2.0 + 3.0);
}

TEST(Autograd, BackwardErrors) {
  const Tensor64 x({2}, {1, 2}, true);
  EXPECT_THROW(ops::scale(x, 2.0).backward(), AutogradError);
  const auto loss = ops::sum(x);
  loss.backward();
  EXPECT_THROW(loss.backward(), AutogradError);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  const Tensor64 x({2}, {1, 2}, true);
  NoGradGuard guard;
  const auto y = ops::sum(x);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, NonFiniteForwardIsAnError) {
  EXPECT_THROW(ops::scale(Tensor::scalar(3e38f), 10.f), NonFiniteError);
}

TEST(Autograd, CompositeGraphMatchesFiniteDifferences) {
  Rng rng(19);
  const auto w = random_tensor<double>(rng, {3, 2, 3, 3});
  const auto b = random_tensor<double>(rng, {3});
  const auto weights = random_tensor<double>(rng, {1, 3, 3, 3});
  const auto x = random_tensor<double>(rng, {1, 2, 6, 6});
  const auto report = finite_diff_check(
      [&](const Tensor64& in) {
        auto y = ops::relu(ops::conv2d(in, w, b, {1, 1}));
        y = ops::max_pool2d(y, 2, 2);
        return ops::sum(ops::mul(y, weights));
      },
      x, 1e-5, 1e-4);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

TEST(GradCheck, LinearFunctionPassesTightly) {
  Rng rng(1);
  const auto x = random_tensor<double>(rng, {4, 3});
  const auto report = finite_diff_check([](const Tensor64& v) { return ops::sum(v); }, x, 1e-5, 1e-9);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
  EXPECT_EQ(report.elements_checked, 12);
}

TEST(GradCheck, SigmoidAtZero) {
  const auto x = Tensor64::zeros({5});
  auto leaf = x.clone().set_requires_grad(true);
  ops::sum(ops::sigmoid(leaf)).backward();
  for (double g : leaf.grad()) EXPECT_DOUBLE_EQ(g, 0.25);
  const auto report = finite_diff_check([](const Tensor64& v) { return ops::sum(ops::sigmoid(v)); }, x);
  EXPECT_TRUE(report.passed);
}

TEST(GradCheck, DetectsNonDeterminism) {
  int calls = 0;
  const auto x = Tensor64::zeros({2});
  EXPECT_THROW(finite_diff_check(
                   [&](const Tensor64& v) { return ops::add(ops::sum(v), Tensor64::scalar(++calls)); }, x),
               std::runtime_error);
}

TEST(GradCheck, DetectsWrongGradient) {
  // A hand-built op whose backward has the wrong sign.
  const auto broken = [](const Tensor64& v) {
    std::vector<double> out(v.data().begin(), v.data().end());
    for (auto& e : out) e = e * e;
    auto y = make_op_result<double>("broken_square", v.shape(), out, {v},
                                    [v](std::span<const double> g, std::span<std::vector<double>*> grads) {
                                      for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] -= 2 * v.data()[i] * g[i];
                                    });
    return ops::sum(y);
  };
  Rng rng(2);
  const auto report = finite_diff_check(broken, random_tensor<double>(rng, {4}));
  EXPECT_FALSE(report.passed);
}
