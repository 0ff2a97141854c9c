#pragma once

// Differentiable primitives. All image tensors are row-major NCHW.
// Every op validates shapes and throws ShapeError naming itself and the
// offending shapes.

#include <cstdint>
#include <vector>

#include "pdse/tensor.hpp"

namespace pdse::ops {

/// a + b, where b has the same rank as a and each extent equal or 1.
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// a * b elementwise with the same broadcasting rule as add().
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);

/// [M,K] x [K,N] -> [M,N]
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// x [N,in] times weight [out,in] transposed, plus optional bias [out].
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias = {});

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
};

/// input [N,I,H,W], weight [O,I,k,k] with k odd, optional bias [O].
/// Output extent floor((H + 2p - k) / s) + 1, zero padding.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, Conv2dOptions options = {});

/// Padding taps are ignored (never selected).
template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, int kernel, int stride, int padding = 0);

/// Padding taps count as zeros (divisor is always kernel*kernel).
template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, int kernel, int stride, int padding = 0);

/// [N,C,H,W] -> [N,C,1,1]
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);

/// [N,C,H,W] -> [N,C,2H,2W], nearest neighbour.
template <typename T>
BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& x);

/// Concatenation along `axis`; all other extents must agree.
template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);

template <typename T>
BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& parts) {
  return concat(parts, 1);
}

/// Running statistics owned by a batch-norm layer. Not differentiable.
template <typename T>
struct BatchNormState {
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  T momentum = T(0.9);  // running <- momentum * running + (1 - momentum) * batch
  T eps = T(1e-5);
};

/// Per-channel normalization of [N,C,H,W]. Training mode normalizes with the
/// biased batch variance and updates the running statistics (unbiased
/// variance); eval mode uses the running statistics.
template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, BatchNormState<T>& state, bool training);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, const Shape& shape);

/// Rows `indices` of a [M,D] tensor, giving [P,D]. Indices may repeat.
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, const std::vector<std::int64_t>& indices);

/// Head layout change: [N, A*K, H, W] -> [N, H*W*A, K], anchor index
/// (y*W + x)*A + a, channel a*K + k.
template <typename T>
BasicTensor<T> to_anchor_major(const BasicTensor<T>& x, std::int64_t anchors_per_cell);

}  // namespace pdse::ops
