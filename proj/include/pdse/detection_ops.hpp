#pragma once

// Deformable convolution, squeeze-and-excitation channel attention, the
// spatial (local) attention gate, and their composition into the
// deformable SE block that refines each pyramid level.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pdse/ops.hpp"
#include "pdse/parameters.hpp"
#include "pdse/tensor.hpp"

namespace pdse {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The four lattice neighbours of a fractional point with their
/// interpolation weights and the weights' derivatives in y and x.
/// A neighbour outside the plane has index -1 and reads as zero.
template <typename T>
struct BilinearStencil {
  std::array<std::int64_t, 4> index{-1, -1, -1, -1};
  std::array<T, 4> weight{};
  std::array<T, 4> d_dy{};
  std::array<T, 4> d_dx{};
};

/// Points with y <= -1, y >= height, x <= -1 or x >= width get an all-empty
/// stencil (sample value 0).
template <typename T>
BilinearStencil<T> bilinear_stencil(std::int64_t height, std::int64_t width, T y, T x);

/// Samples every channel of a [C,H,W] map at (y, x).
template <typename T>
std::vector<T> bilinear_sample(const BasicTensor<T>& map, T y, T x);

/// Differentiable sampling: map [C,H,W], coords [P,2] as (y, x) -> [P,C].
/// Gradients flow to both the map values and the coordinates.
template <typename T>
BasicTensor<T> sample_points(const BasicTensor<T>& map, const BasicTensor<T>& coords);

/// Deformable 3x3 convolution given explicit offsets.
/// input [N,I,H,W], offsets [N,2*k*k,OH,OW] with channel 2t = dy and
/// 2t+1 = dx for kernel tap t = ky*k + kx, weight [O,I,k,k], bias [O] or
/// undefined.
template <typename T>
BasicTensor<T> deformable_conv2d(const BasicTensor<T>& input, const BasicTensor<T>& offsets,
                                 const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                                 ops::Conv2dOptions options = {1, 1});

template <typename T>
struct DeformableConvParams {
  BasicTensor<T> weight;         // [O,I,3,3]
  BasicTensor<T> bias;           // [O]
  BasicTensor<T> offset_weight;  // [18,I,3,3], zero-initialized
  BasicTensor<T> offset_bias;    // [18]
  int stride = 1;
  int padding = 1;

  static DeformableConvParams create(ParameterStore<T>& store, const std::string& prefix,
                                     std::int64_t in_channels, std::int64_t out_channels);
  void validate() const;
};

/// Predicts the offsets with a plain 3x3 conv of the input, then samples.
template <typename T>
BasicTensor<T> deformable_conv2d(const BasicTensor<T>& input, const DeformableConvParams<T>& params);

template <typename T>
struct SEParams {
  BasicTensor<T> w1;  // [C/r, C]
  BasicTensor<T> w2;  // [C, C/r]
  std::int64_t reduction = 16;

  static SEParams create(ParameterStore<T>& store, const std::string& prefix,
                         std::int64_t channels, std::int64_t reduction);
  std::int64_t channels() const { return w1.dim(1); }
  void validate() const;
};

/// Per-channel spatial mean: [N,C,H,W] -> [N,C].
template <typename T>
BasicTensor<T> se_squeeze(const BasicTensor<T>& input);

/// sigmoid(W2 relu(W1 s)) for s [N,C] -> [N,C], each entry in (0,1).
template <typename T>
BasicTensor<T> se_excitation(const BasicTensor<T>& squeezed, const SEParams<T>& params);

/// Channel-wise scaling of input [N,C,H,W] by weights [N,C].
template <typename T>
BasicTensor<T> se_reweight(const BasicTensor<T>& input, const BasicTensor<T>& channel_weights);

template <typename T>
BasicTensor<T> se_block(const BasicTensor<T>& input, const SEParams<T>& params);

template <typename T>
struct LocalAttentionParams {
  BasicTensor<T> weight;  // [1,C,1,1]
  BasicTensor<T> bias;    // [1]

  static LocalAttentionParams create(ParameterStore<T>& store, const std::string& prefix,
                                     std::int64_t channels);
};

/// Spatial gate: input * sigmoid(conv1x1(input)), the [N,1,H,W] gate
/// broadcast over channels.
template <typename T>
BasicTensor<T> local_attention(const BasicTensor<T>& input, const LocalAttentionParams<T>& params);

template <typename T>
struct DSEBlockParams {
  std::int64_t channels = 0;
  BasicTensor<T> entry_weight;  // [C/2,C,1,1]
  BasicTensor<T> entry_bias;
  DeformableConvParams<T> deform;  // C/2 -> C/2
  BasicTensor<T> exit_weight;      // [C,C/2,1,1]
  BasicTensor<T> exit_bias;
  SEParams<T> se;
  LocalAttentionParams<T> local;

  /// Registers "<prefix>.entry.*", "<prefix>.deform.*",
  /// "<prefix>.deform.offset_conv.*", "<prefix>.exit.*", "<prefix>.se.*" and
  /// "<prefix>.local.*". Offsets and the local gate start at zero.
  static DSEBlockParams create(ParameterStore<T>& store, const std::string& prefix,
                               std::int64_t channels, std::int64_t se_reduction);

  /// Every learnable tensor of the block, in registration order.
  std::vector<BasicTensor<T>> tensors() const;
};

/// F = exit(deform(relu(entry(x)))); out = x + local_attention(se_block(F)).
template <typename T>
BasicTensor<T> dse_block(const BasicTensor<T>& input, const DSEBlockParams<T>& params);

}  // namespace pdse
