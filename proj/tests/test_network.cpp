#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "pdse/network.hpp"
#include "pdse/rng.hpp"

using namespace pdse;
using pdse::testing::random_tensor;

namespace {

struct Built {
  ParameterStore<float> store;
  ModelParams<float> params;
  explicit Built(const ModelConfig& config, std::uint64_t seed = 7) : store(seed), params(build_model(config, store)) {}
};

void expect_identical(const BasicTensor<float>& a, const BasicTensor<float>& b) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.data()[i], b.data()[i]) << "at " << i;
}

void zero(BasicTensor<float> t) {
  for (auto& v : t.mutable_data()) v = 0.0f;
}

}  // namespace

TEST(Network, ShapesOn256Input) {
  ModelConfig config;
  Built m(config);
  Rng rng(1);
  const auto image = random_tensor<float>(rng, {1, 1, 256, 256});
  const auto c = backbone_forward(image, m.params.backbone, false);
  ASSERT_EQ(c.size(), 4u);
  const std::int64_t sizes[] = {64, 32, 16, 8};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(c[i].dim(2), sizes[i]);
    EXPECT_EQ(c[i].dim(3), sizes[i]);
    EXPECT_EQ(c[i].dim(1), config.backbone_widths[i]);
  }
  const auto p = fpn_topdown<float>({c[1], c[2], c[3]}, m.params.fpn);
  const auto n = panet_bottomup(p, *m.params.panet1, c[0]);
  const std::int64_t psizes[] = {32, 16, 8, 4, 2};
  for (std::size_t l = 0; l < 5; ++l) {
    EXPECT_EQ(p.levels[l].shape(), (Shape{1, 64, psizes[l], psizes[l]}));
    EXPECT_EQ(n.levels[l].shape(), p.levels[l].shape());
  }
  const auto out = model_forward(image, config, m.params, false);
  ASSERT_EQ(out.class_logits.size(), 5u);
  EXPECT_EQ(out.class_logits[0].shape(), (Shape{1, 81, 32, 32}));
  EXPECT_EQ(out.box_deltas[0].shape(), (Shape{1, 36, 32, 32}));
  for (std::size_t l = 0; l < 5; ++l) {
    EXPECT_EQ(out.class_logits[l].dim(2), out.box_deltas[l].dim(2));
    EXPECT_EQ(out.class_logits[l].dim(3), out.box_deltas[l].dim(3));
  }
}

TEST(Network, InputMustBeDivisibleBy128) {
  Built m(ModelConfig{});
  EXPECT_THROW(backbone_forward(Tensor::zeros({1, 1, 192, 256}), m.params.backbone, false), ConfigError);
  EXPECT_THROW(backbone_forward(Tensor::zeros({1, 3, 128, 128}), m.params.backbone, false), ShapeError);
}

TEST(Network, DeterministicParametersAndOutputs) {
  ModelConfig config;
  Built a(config, 42), b(config, 42);
  ASSERT_EQ(a.store.parameters().size(), b.store.parameters().size());
  for (std::size_t i = 0; i < a.store.parameters().size(); ++i) {
    EXPECT_EQ(a.store.parameters()[i].name, b.store.parameters()[i].name);
    expect_identical(a.store.parameters()[i].tensor, b.store.parameters()[i].tensor);
  }
  Rng rng(2);
  const auto image = random_tensor<float>(rng, {1, 1, 128, 128});
  const auto oa = model_forward(image, config, a.params, false);
  const auto ob = model_forward(image, config, b.params, false);
  const auto oa2 = model_forward(image, config, a.params, false);
  for (std::size_t l = 0; l < 5; ++l) {
    expect_identical(oa.class_logits[l], ob.class_logits[l]);
    expect_identical(oa.box_deltas[l], ob.box_deltas[l]);
    expect_identical(oa.class_logits[l], oa2.class_logits[l]);
  }
}

TEST(Network, ZeroedResidualBranchesLeaveProjectionOnly) {
  ModelConfig config;
  Built m(config);
  for (auto& stage : m.params.backbone.stages) {
    for (auto& block : stage) {
      zero(block.conv1.weight);
      zero(block.conv2.weight);
      zero(block.bn2.gamma);
      zero(block.bn2.beta);
    }
  }
  Rng rng(3);
  const auto image = random_tensor<float>(rng, {2, 1, 128, 128});
  const auto c = backbone_forward(image, m.params.backbone, false);
  // Re-run the stem and each stage's projection alone.
  auto x = ops::relu(m.params.backbone.stem_bn(m.params.backbone.stem(image), false));
  x = ops::max_pool2d(x, 3, 2, 1);
  for (std::size_t s = 0; s < 4; ++s) {
    const auto& first = m.params.backbone.stages[s][0];
    if (first.projection) x = ops::relu((*first.projection_bn)((*first.projection)(x), false));
    else x = ops::relu(x);
    expect_identical(c[s], x);
  }
}

TEST(Network, FpnZeroLateralsGiveZeroPyramid) {
  Built m(ModelConfig{});
  for (auto& lat : m.params.fpn.lateral) zero(lat.weight);
  Rng rng(4);
  const auto c = backbone_forward(random_tensor<float>(rng, {1, 1, 128, 128}), m.params.backbone, false);
  const auto p = fpn_topdown<float>({c[1], c[2], c[3]}, m.params.fpn);
  for (const auto& level : p.levels)
    for (const float v : level.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Network, FpnTopDownMatchesComposedOracles) {
  Built m(ModelConfig{});
  Rng rng(5);
  std::vector<BasicTensor<float>> c{random_tensor<float>(rng, {1, 32, 16, 16}), random_tensor<float>(rng, {1, 64, 8, 8}),
                                    random_tensor<float>(rng, {1, 128, 4, 4})};
  const auto p = fpn_topdown(c, m.params.fpn);
  const auto lat = [&](std::size_t i) { return pdse::testing::naive_conv2d(c[i], m.params.fpn.lateral[i].weight, {}, 1, 0); };
  const auto p5 = lat(2);
  std::vector<double> p4 = lat(1);
  const auto up5 = pdse::testing::naive_upsample2x(p5, 64, 4, 4);
  for (std::size_t i = 0; i < p4.size(); ++i) p4[i] += up5[i];
  std::vector<double> p3 = lat(0);
  const auto up4 = pdse::testing::naive_upsample2x(p4, 64, 8, 8);
  for (std::size_t i = 0; i < p3.size(); ++i) p3[i] += up4[i];
  EXPECT_LT(pdse::testing::max_abs_diff(p.levels[2].data(), p5), 1e-4);
  EXPECT_LT(pdse::testing::max_abs_diff(p.levels[1].data(), p4), 1e-4);
  EXPECT_LT(pdse::testing::max_abs_diff(p.levels[0].data(), p3), 1e-4);
  EXPECT_EQ(p.levels[3].shape(), (Shape{1, 64, 2, 2}));
  EXPECT_EQ(p.levels[4].shape(), (Shape{1, 64, 1, 1}));
  EXPECT_THROW(fpn_topdown<float>({c[0], c[0], c[2]}, m.params.fpn), ShapeError);
}

TEST(Network, PanetPassThroughWhenAggregationIsZero) {
  ModelConfig config;
  config.zero_init_aggregation = true;
  Built m(config);
  Rng rng(6);
  const auto c = backbone_forward(random_tensor<float>(rng, {1, 1, 128, 128}), m.params.backbone, false);
  const auto p = fpn_topdown<float>({c[1], c[2], c[3]}, m.params.fpn);
  const auto n = panet_bottomup(p, *m.params.panet1, c[0]);
  for (std::size_t l = 0; l < 5; ++l) expect_identical(n.levels[l], p.levels[l]);
  const auto n2 = panet_bottomup(p, *m.params.panet2);
  for (std::size_t l = 0; l < 5; ++l) expect_identical(n2.levels[l], p.levels[l]);
  EXPECT_THROW(panet_bottomup(p, *m.params.panet1), ConfigError);
}

TEST(Network, ToggleIsolationAtInitialization) {
  ModelConfig with;
  with.use_dse = false;
  with.zero_init_aggregation = true;
  ModelConfig without = with;
  without.use_panet = false;
  Built a(with, 99), b(without, 99);
  Rng rng(7);
  const auto image = random_tensor<float>(rng, {1, 1, 128, 128});
  const auto oa = model_forward(image, with, a.params, false);
  const auto ob = model_forward(image, without, b.params, false);
  for (std::size_t l = 0; l < 5; ++l) {
    expect_identical(oa.class_logits[l], ob.class_logits[l]);
    expect_identical(oa.box_deltas[l], ob.box_deltas[l]);
  }
}

TEST(Network, ToggleNeedsItsParameters) {
  ModelConfig base;
  base.use_dse = false;
  base.use_panet = false;
  Built m(base);
  const auto image = Tensor::zeros({1, 1, 128, 128});
  ModelConfig dse = base;
  dse.use_dse = true;
  EXPECT_THROW(model_forward(image, dse, m.params, false), ConfigError);
  ModelConfig panet = base;
  panet.use_panet = true;
  EXPECT_THROW(model_forward(image, panet, m.params, false), ConfigError);
}

TEST(Network, InitialForegroundProbabilityNearPrior) {
  ModelConfig config;
  Built m(config);
  Rng rng(8);
  const auto out = model_forward(random_tensor<float>(rng, {1, 1, 128, 128}), config, m.params, false);
  EXPECT_NEAR(mean_foreground_probability(out), 0.01, 0.005);
}

TEST(Network, HeadWeightsAreSharedAcrossLevels) {
  ModelConfig config;
  Built m(config);
  Rng rng(9);
  const auto image = random_tensor<float>(rng, {1, 1, 128, 128});
  const auto before = model_forward(image, config, m.params, false);
  for (auto& v : m.params.head.class_tower[0].weight.mutable_data()) v += 0.05f;
  for (auto& v : m.params.head.box_out.bias.mutable_data()) v += 0.1f;
  const auto after = model_forward(image, config, m.params, false);
  for (std::size_t l = 0; l < 5; ++l) {
    EXPECT_GT(pdse::testing::max_abs_diff(before.class_logits[l].data(), after.class_logits[l].data()), 0.0) << l;
    EXPECT_GT(pdse::testing::max_abs_diff(before.box_deltas[l].data(), after.box_deltas[l].data()), 0.0) << l;
  }
}

TEST(Network, EveryParameterReceivesFiniteGradient) {
  ModelConfig config;
  Built m(config);
  Rng rng(10);
  const auto image = random_tensor<float>(rng, {2, 1, 128, 128});
  const auto out = model_forward(image, config, m.params, true);
  BasicTensor<float> loss;
  for (std::size_t l = 0; l < 5; ++l) {
    for (const auto& t : {out.class_logits[l], out.box_deltas[l]}) {
      const auto term = ops::sum(ops::mul(t, random_tensor<float>(rng, t.shape())));
      loss = loss.defined() ? ops::add(loss, term) : term;
    }
  }
  loss.backward();
  for (const auto& p : m.store.parameters()) {
    ASSERT_TRUE(p.tensor.has_grad()) << p.name;
    double mag = 0.0;
    for (const float g : p.tensor.grad()) {
      ASSERT_TRUE(std::isfinite(g)) << p.name;
      mag = std::max(mag, std::abs(static_cast<double>(g)));
    }
    EXPECT_GT(mag, 0.0) << p.name;
  }
}

TEST(Network, ParameterNamesFollowLevelConvention) {
  ModelConfig config;
  Built m(config);
  for (const char* name : {"dse.p3.deform.offset_conv.weight", "dse.p7.se.w1", "panet1.low_level.weight",
                           "panet2.down.p7.weight", "refresh.p3.weight", "head.class.out.bias",
                           "backbone.stage2.block0.projection.weight", "fpn.lateral.c5.weight"}) {
    EXPECT_TRUE(m.store.contains(name)) << name;
  }
  EXPECT_FALSE(m.store.contains("panet2.low_level.weight"));
  const auto bias = m.store.get("head.class.out.bias");
  EXPECT_NEAR(bias.data()[0], -std::log(99.0), 1e-6);
}

TEST(Network, SharedGroupsInitializeIdenticallyAcrossVariants) {
  ModelConfig full;
  ModelConfig base = full;
  base.use_panet = false;
  base.use_dse = false;
  Built a(full, 5), b(base, 5);
  for (const auto& p : b.store.parameters()) {
    ASSERT_TRUE(a.store.contains(p.name)) << p.name;
    expect_identical(a.store.get(p.name), p.tensor);
  }
}
