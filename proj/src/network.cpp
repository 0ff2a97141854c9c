#include "pdse/network.hpp"

#include <cmath>
#include <string>

namespace pdse {

namespace {

std::string level_name(std::size_t index) { return "p" + std::to_string(index + 3); }

// Variance-preserving init for the linear (activation-free) neck convs.
Init neck_init(std::int64_t fan_in) { return Init::normal(1.0 / std::sqrt(static_cast<double>(fan_in))); }

template <typename T>
void require_same_spatial(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError(std::string(op) + ": level-size mismatch (" + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()) + ")");
  }
}

template <typename T>
void require_pyramid(const char* op, const FeaturePyramid<T>& p) {
  if (p.levels.size() != kNumPyramidLevels) {
    throw ShapeError(std::string(op) + ": expected 5 pyramid levels, got " + std::to_string(p.levels.size()));
  }
}

}  // namespace

void ModelConfig::validate() const {
  anchors.validate();
  if (anchors.strides.size() != kNumPyramidLevels) throw ConfigError("model config: anchors need 5 levels");
  if (backbone_blocks.size() != 4 || backbone_widths.size() != 4) {
    throw ConfigError("model config: backbone needs exactly 4 stages");
  }
  for (std::size_t i = 0; i < 4; ++i) {
    if (backbone_blocks[i] < 1 || backbone_widths[i] < 1) throw ConfigError("model config: empty backbone stage");
  }
  if (stem_width < 1 || pyramid_width < 1 || head_width < 1 || head_depth < 0) {
    throw ConfigError("model config: widths must be positive");
  }
  if (num_classes != kNumLesionClasses) throw ConfigError("model config: num_classes must be 9");
  if (!(prior_probability > 0.0 && prior_probability < 1.0)) throw ConfigError("model config: prior outside (0,1)");
  if (box_loss_weight < 0.0) throw ConfigError("model config: negative box loss weight");
  if (use_dse) {
    if (pyramid_width % 2 != 0) throw ConfigError("model config: DSE needs an even pyramid width");
    if (se_reduction < 1 || pyramid_width % se_reduction != 0) {
      throw ConfigError("model config: se_reduction must divide the pyramid width");
    }
    for (const int l : dse_levels) {
      if (l < 3 || l > 7) throw ConfigError("model config: DSE level " + std::to_string(l) + " outside 3..7");
    }
  }
}

template <typename T>
ConvLayer<T> ConvLayer<T>::create(ParameterStore<T>& store, const std::string& name, std::int64_t in,
                                  std::int64_t out, int kernel, int stride, Init init, bool with_bias) {
  ConvLayer layer;
  layer.weight = store.add(name + ".weight", {out, in, kernel, kernel}, init);
  if (with_bias) layer.bias = store.add(name + ".bias", {out}, Init::zeros());
  layer.stride = stride;
  layer.padding = kernel / 2;
  return layer;
}

template <typename T>
BasicTensor<T> ConvLayer<T>::operator()(const BasicTensor<T>& x) const {
  return ops::conv2d(x, weight, bias, {stride, padding});
}

template <typename T>
BatchNormLayer<T> BatchNormLayer<T>::create(ParameterStore<T>& store, const std::string& name,
                                            std::int64_t channels) {
  BatchNormLayer layer;
  layer.gamma = store.add(name + ".gamma", {channels}, Init::constant(1.0));
  layer.beta = store.add(name + ".beta", {channels}, Init::zeros());
  layer.state.running_mean = store.add_buffer(name + ".running_mean", {channels}, T(0));
  layer.state.running_var = store.add_buffer(name + ".running_var", {channels}, T(1));
  return layer;
}

template <typename T>
BasicTensor<T> BatchNormLayer<T>::operator()(const BasicTensor<T>& x, bool training) const {
  return ops::batch_norm(x, gamma, beta, state, training);
}

template <typename T>
ModelParams<T> build_model(const ModelConfig& config, ParameterStore<T>& store) {
  config.validate();
  ModelParams<T> m;
  const std::int64_t wf = config.pyramid_width;

  auto& bb = m.backbone;
  bb.stem = ConvLayer<T>::create(store, "backbone.stem.conv", 1, config.stem_width, 7, 2, Init::he(49), false);
  bb.stem_bn = BatchNormLayer<T>::create(store, "backbone.stem.bn", config.stem_width);
  std::int64_t in = config.stem_width;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::int64_t width = config.backbone_widths[s];
    std::vector<ResidualBlock<T>> stage;
    for (int b = 0; b < config.backbone_blocks[s]; ++b) {
      const std::string prefix = "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      ResidualBlock<T> block;
      block.conv1 = ConvLayer<T>::create(store, prefix + ".conv1", in, width, 3, stride, Init::he(in * 9), false);
      block.bn1 = BatchNormLayer<T>::create(store, prefix + ".bn1", width);
      block.conv2 = ConvLayer<T>::create(store, prefix + ".conv2", width, width, 3, 1, Init::he(width * 9), false);
      block.bn2 = BatchNormLayer<T>::create(store, prefix + ".bn2", width);
      if (stride != 1 || in != width) {
        block.projection = ConvLayer<T>::create(store, prefix + ".projection", in, width, 1, stride, Init::he(in), false);
        block.projection_bn = BatchNormLayer<T>::create(store, prefix + ".projection_bn", width);
      }
      stage.push_back(std::move(block));
      in = width;
    }
    bb.stages.push_back(std::move(stage));
  }

  for (std::size_t i = 1; i < 4; ++i) {
    const std::int64_t c = config.backbone_widths[i];
    m.fpn.lateral.push_back(
        ConvLayer<T>::create(store, "fpn.lateral.c" + std::to_string(i + 2), c, wf, 1, 1, neck_init(c), false));
  }
  m.fpn.p6 = ConvLayer<T>::create(store, "fpn.p6", wf, wf, 3, 2, neck_init(wf * 9), false);
  m.fpn.p7 = ConvLayer<T>::create(store, "fpn.p7", wf, wf, 3, 2, Init::he(wf * 9), false);

  if (config.use_panet) {
    const auto agg = [&](std::int64_t fan_in) { return config.zero_init_aggregation ? Init::zeros() : neck_init(fan_in); };
    for (const char* name : {"panet1", "panet2"}) {
      PANetParams<T> pa;
      for (std::size_t l = 1; l < kNumPyramidLevels; ++l) {
        pa.down.push_back(ConvLayer<T>::create(store, std::string(name) + ".down." + level_name(l), wf, wf, 3, 2,
                                               agg(wf * 9), false));
      }
      if (config.include_low_level && std::string(name) == "panet1") {
        const std::int64_t c2 = config.backbone_widths[0];
        pa.low_level = ConvLayer<T>::create(store, "panet1.low_level", c2, wf, 3, 2, agg(c2 * 9), false);
      }
      (std::string(name) == "panet1" ? m.panet1 : m.panet2) = std::move(pa);
    }
    RefreshParams<T> refresh;
    for (std::size_t l = 0; l + 1 < kNumPyramidLevels; ++l) {
      refresh.lateral.push_back(
          ConvLayer<T>::create(store, "refresh." + level_name(l), wf, wf, 1, 1, agg(wf), false));
    }
    m.refresh = std::move(refresh);
  }

  m.dse.resize(kNumPyramidLevels);
  if (config.use_dse) {
    for (const int l : config.dse_levels) {
      m.dse[static_cast<std::size_t>(l - 3)] =
          DSEBlockParams<T>::create(store, "dse.p" + std::to_string(l), wf, config.se_reduction);
    }
  }

  const std::int64_t hw = config.head_width, a = config.anchors_per_cell();
  for (int i = 0; i < config.head_depth; ++i) {
    const std::int64_t cin = i == 0 ? wf : hw;
    m.head.class_tower.push_back(ConvLayer<T>::create(store, "head.class.conv" + std::to_string(i), cin, hw, 3, 1,
                                                      Init::normal(0.01), true));
    m.head.box_tower.push_back(ConvLayer<T>::create(store, "head.box.conv" + std::to_string(i), cin, hw, 3, 1,
                                                    Init::normal(0.01), true));
  }
  const std::int64_t tower_out = config.head_depth > 0 ? hw : wf;
  m.head.class_out = ConvLayer<T>::create(store, "head.class.out", tower_out, a * config.num_classes, 3, 1,
                                          Init::normal(0.01), false);
  const double prior_bias = -std::log((1.0 - config.prior_probability) / config.prior_probability);
  m.head.class_out.bias = store.add("head.class.out.bias", {a * config.num_classes}, Init::constant(prior_bias));
  m.head.box_out = ConvLayer<T>::create(store, "head.box.out", tower_out, a * 4, 3, 1, Init::normal(0.01), true);
  return m;
}

template <typename T>
BasicTensor<T> residual_block_forward(const BasicTensor<T>& x, const ResidualBlock<T>& block, bool training) {
  auto y = ops::relu(block.bn1(block.conv1(x), training));
  y = block.bn2(block.conv2(y), training);
  const auto shortcut = block.projection ? (*block.projection_bn)((*block.projection)(x), training) : x;
  return ops::relu(ops::add(y, shortcut));
}

template <typename T>
std::vector<BasicTensor<T>> backbone_forward(const BasicTensor<T>& image, const BackboneParams<T>& params,
                                             bool training) {
  if (image.rank() != 4 || image.dim(1) != 1) {
    throw ShapeError("backbone_forward: expected [N,1,H,W] input, got " + shape_str(image.shape()));
  }
  if (image.dim(2) % 128 != 0 || image.dim(3) % 128 != 0) {
    throw ConfigError("backbone_forward: input " + shape_str(image.shape()) + " is not divisible by 128");
  }
  auto x = ops::relu(params.stem_bn(params.stem(image), training));
  x = ops::max_pool2d(x, 3, 2, 1);
  std::vector<BasicTensor<T>> features;
  for (const auto& stage : params.stages) {
    for (const auto& block : stage) x = residual_block_forward(x, block, training);
    features.push_back(x);
  }
  return features;
}

template <typename T>
FeaturePyramid<T> fpn_topdown(const std::vector<BasicTensor<T>>& features, const FPNParams<T>& params) {
  if (features.size() != 3) throw ShapeError("fpn_topdown: expected C3..C5");
  for (std::size_t i = 0; i + 1 < 3; ++i) {
    const auto& a = features[i];
    const auto& b = features[i + 1];
    if (a.dim(2) != 2 * b.dim(2) || a.dim(3) != 2 * b.dim(3)) {
      throw ShapeError("fpn_topdown: level-size mismatch (" + shape_str(a.shape()) + " vs " + shape_str(b.shape()) +
                       ")");
    }
  }
  FeaturePyramid<T> p;
  p.levels.resize(kNumPyramidLevels);
  p.levels[2] = params.lateral[2](features[2]);
  for (std::size_t i = 2; i-- > 0;) {
    p.levels[i] = ops::add(params.lateral[i](features[i]), ops::upsample_nearest2x(p.levels[i + 1]));
  }
  p.levels[3] = params.p6(p.levels[2]);
  p.levels[4] = params.p7(ops::relu(p.levels[3]));
  return p;
}

template <typename T>
FeaturePyramid<T> panet_bottomup(const FeaturePyramid<T>& pyramid, const PANetParams<T>& params,
                                 const BasicTensor<T>& low_level) {
  require_pyramid("panet_bottomup", pyramid);
  FeaturePyramid<T> n;
  n.levels.resize(kNumPyramidLevels);
  n.levels[0] = pyramid.levels[0];
  if (params.low_level) {
    if (!low_level.defined()) throw ConfigError("panet_bottomup: missing low-level map");
    const auto injected = (*params.low_level)(low_level);
    require_same_spatial("panet_bottomup", injected, pyramid.levels[0]);
    n.levels[0] = ops::add(pyramid.levels[0], injected);
  }
  for (std::size_t l = 1; l < kNumPyramidLevels; ++l) {
    const auto down = params.down[l - 1](n.levels[l - 1]);
    require_same_spatial("panet_bottomup", down, pyramid.levels[l]);
    n.levels[l] = ops::add(down, pyramid.levels[l]);
  }
  return n;
}

template <typename T>
FeaturePyramid<T> refresh_topdown(const FeaturePyramid<T>& pyramid, const RefreshParams<T>& params) {
  require_pyramid("refresh_topdown", pyramid);
  FeaturePyramid<T> r;
  r.levels.resize(kNumPyramidLevels);
  r.levels[4] = pyramid.levels[4];
  for (std::size_t l = kNumPyramidLevels - 1; l-- > 0;) {
    // A 1x1 conv commutes with nearest upsampling; convolve the coarse map.
    const auto up = ops::upsample_nearest2x(params.lateral[l](r.levels[l + 1]));
    require_same_spatial("refresh_topdown", up, pyramid.levels[l]);
    r.levels[l] = ops::add(pyramid.levels[l], up);
  }
  return r;
}

template <typename T>
HeadOutputs<T> heads_forward(const FeaturePyramid<T>& pyramid, const HeadParams<T>& params) {
  HeadOutputs<T> out;
  for (const auto& level : pyramid.levels) {
    auto c = level;
    for (const auto& conv : params.class_tower) c = ops::relu(conv(c));
    out.class_logits.push_back(params.class_out(c));
    auto b = level;
    for (const auto& conv : params.box_tower) b = ops::relu(conv(b));
    out.box_deltas.push_back(params.box_out(b));
  }
  return out;
}

template <typename T>
HeadOutputs<T> model_forward(const BasicTensor<T>& image, const ModelConfig& config, const ModelParams<T>& params,
                             bool training) {
  if (config.use_panet && (!params.panet1 || !params.panet2 || !params.refresh)) {
    throw ConfigError("model_forward: use_panet is set but PANet parameters were not built");
  }
  if (config.use_panet && config.include_low_level && !params.panet1->low_level) {
    throw ConfigError("model_forward: include_low_level is set but the low-level projection was not built");
  }
  if (config.use_dse) {
    for (const int l : config.dse_levels) {
      if (l < 3 || l > 7 || !params.dse[static_cast<std::size_t>(l - 3)]) {
        throw ConfigError("model_forward: use_dse is set but dse.p" + std::to_string(l) + " was not built");
      }
    }
  }
  const auto c = backbone_forward(image, params.backbone, training);
  auto p = fpn_topdown<T>({c[1], c[2], c[3]}, params.fpn);
  if (config.use_panet) {
    const BasicTensor<T> low = config.include_low_level ? c[0] : BasicTensor<T>{};
    p = panet_bottomup(p, *params.panet1, low);
    p = refresh_topdown(p, *params.refresh);
    p = panet_bottomup(p, *params.panet2);
  }
  if (config.use_dse) {
    for (const int l : config.dse_levels) {
      const auto i = static_cast<std::size_t>(l - 3);
      p.levels[i] = dse_block(p.levels[i], *params.dse[i]);
    }
  }
  return heads_forward(p, params.head);
}

template <typename T>
double mean_foreground_probability(const HeadOutputs<T>& outputs) {
  double total = 0.0;
  std::int64_t count = 0;
  for (const auto& logits : outputs.class_logits) {
    for (const T z : logits.data()) total += 1.0 / (1.0 + std::exp(-static_cast<double>(z)));
    count += logits.numel();
  }
  return count > 0 ? total / static_cast<double>(count) : 0.0;
}

#define PDSE_INSTANTIATE(T)                                                                                    \
  template struct ConvLayer<T>;                                                                                \
  template struct BatchNormLayer<T>;                                                                           \
  template ModelParams<T> build_model<T>(const ModelConfig&, ParameterStore<T>&);                              \
  template BasicTensor<T> residual_block_forward<T>(const BasicTensor<T>&, const ResidualBlock<T>&, bool);     \
  template std::vector<BasicTensor<T>> backbone_forward<T>(const BasicTensor<T>&, const BackboneParams<T>&,   \
                                                           bool);                                              \
  template FeaturePyramid<T> fpn_topdown<T>(const std::vector<BasicTensor<T>>&, const FPNParams<T>&);          \
  template FeaturePyramid<T> panet_bottomup<T>(const FeaturePyramid<T>&, const PANetParams<T>&,               \
                                               const BasicTensor<T>&);                                         \
  template FeaturePyramid<T> refresh_topdown<T>(const FeaturePyramid<T>&, const RefreshParams<T>&);            \
  template HeadOutputs<T> heads_forward<T>(const FeaturePyramid<T>&, const HeadParams<T>&);                    \
  template HeadOutputs<T> model_forward<T>(const BasicTensor<T>&, const ModelConfig&, const ModelParams<T>&,  \
                                           bool);                                                              \
  template double mean_foreground_probability<T>(const HeadOutputs<T>&);

PDSE_INSTANTIATE(float)
PDSE_INSTANTIATE(double)
#undef PDSE_INSTANTIATE

}  // namespace pdse
