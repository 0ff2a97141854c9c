#pragma once

// Anchor tiling, ground-truth assignment and the box parameterization shared
// by training and inference.

#include <array>
#include <cstdint>
#include <vector>

#include "pdse/box.hpp"

namespace pdse {

struct AnchorConfig {
  std::vector<int> strides{8, 16, 32, 64, 128};
  std::vector<double> base_sizes{16, 32, 64, 128, 256};
  std::vector<double> scales{1.0, 1.2599210498948732, 1.5874010519681994};
  /// Height over width.
  std::vector<double> ratios{0.5, 1.0, 2.0};

  std::int64_t anchors_per_cell() const {
    return static_cast<std::int64_t>(scales.size() * ratios.size());
  }
  /// Throws ConfigError on empty or inconsistent lists.
  void validate() const;
};

/// Anchors of every level, each level ordered by cell row, cell column, then
/// anchor a = ratio_index * scales.size() + scale_index.
struct AnchorSet {
  std::vector<std::vector<Box>> levels;
  std::vector<std::int64_t> heights;
  std::vector<std::int64_t> widths;
  std::int64_t anchors_per_cell = 0;

  std::int64_t total() const;
  /// All levels concatenated in level order.
  std::vector<Box> flat() const;
};

/// Input extents must be divisible by the largest stride.
AnchorSet generate_anchors(const AnchorConfig& config, std::int64_t height, std::int64_t width);

struct GroundTruth {
  Box box;
  int class_id = 0;  // 1..num_classes
};

constexpr int kLabelIgnore = -1;
constexpr int kLabelBackground = 0;

struct AssignConfig {
  double positive_iou = 0.5;
  double negative_iou = 0.4;
};

struct AssignmentResult {
  /// kLabelIgnore, kLabelBackground or the matched class id.
  std::vector<int> labels;
  /// Ground-truth index for positives, -1 otherwise.
  std::vector<int> matched_gt;
  /// Encoded regression target for positives, zeros otherwise.
  std::vector<std::array<double, 4>> targets;

  std::int64_t num_positive() const;
  std::int64_t num_ignored() const;
};

/// Max-IoU rule with thresholds from `config`; afterwards each ground truth's
/// highest-IoU anchor (lowest index on ties, IoU > 0 required) is forced
/// positive for it, later ground truths taking precedence.
AssignmentResult assign_targets(const std::vector<Box>& anchors, const std::vector<GroundTruth>& ground_truth,
                                const AssignConfig& config = {});

/// ((cx - cxa) / wa, (cy - cya) / ha, log(w / wa), log(h / ha)).
std::array<double, 4> encode_box(const Box& anchor, const Box& gt);

/// Inverse of encode_box with log-scale deltas clamped to log(1000 / 16).
/// Not clipped.
Box decode_box(const Box& anchor, const std::array<double, 4>& deltas);

}  // namespace pdse
