#pragma once

// Detector assembly: residual backbone, FPN, two PANet bottom-up couplings
// around a top-down refresh, per-level DSE blocks, and shared heads.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pdse/anchors.hpp"
#include "pdse/detection_ops.hpp"
#include "pdse/losses.hpp"
#include "pdse/ops.hpp"
#include "pdse/parameters.hpp"

namespace pdse {

constexpr int kNumLesionClasses = 9;
constexpr int kNumPyramidLevels = 5;  // P3..P7

struct ModelConfig {
  bool use_panet = true;
  bool use_dse = true;
  bool include_low_level = true;
  std::vector<int> backbone_blocks{2, 2, 2, 2};
  std::vector<int> backbone_widths{16, 32, 64, 128};
  int stem_width = 16;
  int pyramid_width = 64;
  int head_depth = 4;
  int head_width = 64;
  int num_classes = kNumLesionClasses;
  int se_reduction = 16;
  /// Pyramid levels (3..7) that receive a DSE block when use_dse is set.
  std::vector<int> dse_levels{3, 4, 5, 6, 7};
  AnchorConfig anchors;
  FocalLossOptions focal;
  double box_loss_weight = 1.0;
  double prior_probability = 0.01;
  /// Start every PANet and refresh conv at zero.
  bool zero_init_aggregation = false;

  /// Throws ConfigError.
  void validate() const;
  std::int64_t anchors_per_cell() const { return anchors.anchors_per_cell(); }
};

template <typename T>
struct ConvLayer {
  BasicTensor<T> weight;
  BasicTensor<T> bias;  // undefined when bias-free
  int stride = 1;
  int padding = 0;

  static ConvLayer create(ParameterStore<T>& store, const std::string& name, std::int64_t in, std::int64_t out,
                          int kernel, int stride, Init init, bool with_bias);
  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
};

template <typename T>
struct BatchNormLayer {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  mutable ops::BatchNormState<T> state;  // running statistics live in the store's buffers

  static BatchNormLayer create(ParameterStore<T>& store, const std::string& name, std::int64_t channels);
  BasicTensor<T> operator()(const BasicTensor<T>& x, bool training) const;
};

/// relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x)); the shortcut is a
/// strided 1x1 conv + bn when the shape changes.
template <typename T>
struct ResidualBlock {
  ConvLayer<T> conv1, conv2;
  BatchNormLayer<T> bn1, bn2;
  std::optional<ConvLayer<T>> projection;
  std::optional<BatchNormLayer<T>> projection_bn;
};

template <typename T>
struct BackboneParams {
  ConvLayer<T> stem;
  BatchNormLayer<T> stem_bn;
  std::vector<std::vector<ResidualBlock<T>>> stages;
};

template <typename T>
struct FPNParams {
  std::vector<ConvLayer<T>> lateral;  // C3, C4, C5 -> W_f
  ConvLayer<T> p6, p7;
};

template <typename T>
struct PANetParams {
  std::vector<ConvLayer<T>> down;  // N_{l-1} -> N_l for l = 4..7
  std::optional<ConvLayer<T>> low_level;
};

template <typename T>
struct RefreshParams {
  std::vector<ConvLayer<T>> lateral;  // R_{l+1} -> R_l for l = 3..6
};

template <typename T>
struct HeadParams {
  std::vector<ConvLayer<T>> class_tower, box_tower;
  ConvLayer<T> class_out, box_out;
};

template <typename T>
struct ModelParams {
  BackboneParams<T> backbone;
  FPNParams<T> fpn;
  std::optional<PANetParams<T>> panet1, panet2;
  std::optional<RefreshParams<T>> refresh;
  std::vector<std::optional<DSEBlockParams<T>>> dse;  // indexed by level - 3
  HeadParams<T> head;
};

/// Registers every tensor the configuration needs in `store`.
template <typename T>
ModelParams<T> build_model(const ModelConfig& config, ParameterStore<T>& store);

/// Levels P3..P7 (index 0 is P3), all of width W_f.
template <typename T>
struct FeaturePyramid {
  std::vector<BasicTensor<T>> levels;
};

template <typename T>
struct HeadOutputs {
  std::vector<BasicTensor<T>> class_logits;  // [N, A*K, H, W] per level
  std::vector<BasicTensor<T>> box_deltas;    // [N, A*4, H, W] per level
};

/// C2..C5 at strides 4, 8, 16, 32. Input extents must be divisible by 128.
template <typename T>
std::vector<BasicTensor<T>> backbone_forward(const BasicTensor<T>& image, const BackboneParams<T>& params,
                                             bool training);

template <typename T>
BasicTensor<T> residual_block_forward(const BasicTensor<T>& x, const ResidualBlock<T>& block, bool training);

/// P5 = lat(C5), P_l = lat(C_l) + up2(P_{l+1}), P6 = conv_s2(P5),
/// P7 = conv_s2(relu(P6)). Takes C3..C5.
template <typename T>
FeaturePyramid<T> fpn_topdown(const std::vector<BasicTensor<T>>& features, const FPNParams<T>& params);

/// N3 = P3 (+ projected low-level map), N_l = conv3x3_s2(N_{l-1}) + P_l.
template <typename T>
FeaturePyramid<T> panet_bottomup(const FeaturePyramid<T>& pyramid, const PANetParams<T>& params,
                                 const BasicTensor<T>& low_level = {});

/// R7 = N7, R_l = N_l + conv1x1(up2(R_{l+1})).
template <typename T>
FeaturePyramid<T> refresh_topdown(const FeaturePyramid<T>& pyramid, const RefreshParams<T>& params);

template <typename T>
HeadOutputs<T> heads_forward(const FeaturePyramid<T>& pyramid, const HeadParams<T>& params);

/// Full detector. Throws ConfigError when a toggle needs parameters that
/// were not built.
template <typename T>
HeadOutputs<T> model_forward(const BasicTensor<T>& image, const ModelConfig& config, const ModelParams<T>& params,
                             bool training);

/// Mean of sigmoid over every class logit of every level.
template <typename T>
double mean_foreground_probability(const HeadOutputs<T>& outputs);

}  // namespace pdse
