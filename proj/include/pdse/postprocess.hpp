#pragma once

#include <cstddef>
#include <vector>

#include "pdse/anchors.hpp"
#include "pdse/box.hpp"
#include "pdse/network.hpp"

namespace pdse {

struct Detection {
  Box box;
  double score = 0.0;
  int class_id = 0;  // 1..9
};

struct PostprocessConfig {
  double score_thresh = 0.05;
  int pre_nms_topk = 1000;
  double nms_iou = 0.5;
  int max_dets = 100;
};

/// Greedy NMS. Candidates are visited by (score desc, index asc); a candidate
/// is dropped when its IoU with any kept box exceeds `iou_thresh`. Returns
/// kept indices in visiting order.
std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double iou_thresh);

/// Per image of the batch: per level sigmoid scores above the threshold,
/// the level's top-k (score desc, candidate index asc), decoded and clipped
/// to the image; then class-wise NMS across levels and the best max_dets by
/// score. Boxes that clip to zero area are discarded.
template <typename T>
std::vector<std::vector<Detection>> postprocess(const HeadOutputs<T>& outputs, const AnchorSet& anchors,
                                                int num_classes, double image_width, double image_height,
                                                const PostprocessConfig& config = {});

}  // namespace pdse
