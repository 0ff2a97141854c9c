#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "pdse/tensor.hpp"

namespace pdse {

struct FocalLossOptions {
  double alpha = 0.25;
  double gamma = 2.0;
};

template <typename T>
struct FocalLossResult {
  BasicTensor<T> loss;  // shape [1]
  std::int64_t num_positive = 0;
  /// Every anchor carried the ignore label; loss is 0.
  bool all_ignored = false;
};

/// Sigmoid focal loss over logits [M, K]. labels[m] is kLabelIgnore (row
/// skipped), kLabelBackground, or a class id c in 1..K (column c-1 is the
/// positive target). Summed over rows and columns, divided by
/// max(1, positives).
template <typename T>
FocalLossResult<T> focal_loss(const BasicTensor<T>& logits, const std::vector<int>& labels,
                              FocalLossOptions options = {});

/// Elementwise 0.5 d^2 / beta for |d| < beta, |d| - 0.5 beta otherwise,
/// averaged over all elements. Zero elements give 0. Only `pred` is
/// differentiated.
template <typename T>
BasicTensor<T> smooth_l1_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, double beta = 1.0 / 9.0);

/// smooth_l1_loss over the rows `positives` of box deltas [M, 4] against
/// their encoded targets. No positives gives a constant 0.
template <typename T>
BasicTensor<T> box_regression_loss(const BasicTensor<T>& deltas, const std::vector<std::int64_t>& positives,
                                   const std::vector<std::array<double, 4>>& targets, double beta = 1.0 / 9.0);

}  // namespace pdse
