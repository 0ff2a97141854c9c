#include "pdse/anchors.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "pdse/detection_ops.hpp"

namespace pdse {

namespace {

constexpr double kMaxLogScale = 4.135166556742356;  // log(1000 / 16)

void require_positive(const Box& anchor, const char* op) {
  if (!(anchor.width() > 0.0) || !(anchor.height() > 0.0)) {
    throw std::invalid_argument(std::string(op) + ": anchor has non-positive width or height");
  }
}

}  // namespace

void AnchorConfig::validate() const {
  if (scales.empty() || ratios.empty()) throw ConfigError("anchor config: scales and ratios must be non-empty");
  if (strides.empty() || strides.size() != base_sizes.size()) {
    throw ConfigError("anchor config: need one base size per stride");
  }
  for (std::size_t i = 0; i < strides.size(); ++i) {
    if (strides[i] <= 0 || base_sizes[i] <= 0.0) throw ConfigError("anchor config: non-positive stride or size");
  }
  for (const double s : scales)
    if (!(s > 0.0)) throw ConfigError("anchor config: non-positive scale");
  for (const double r : ratios)
    if (!(r > 0.0)) throw ConfigError("anchor config: non-positive ratio");
}

std::int64_t AnchorSet::total() const {
  std::int64_t n = 0;
  for (const auto& level : levels) n += static_cast<std::int64_t>(level.size());
  return n;
}

std::vector<Box> AnchorSet::flat() const {
  std::vector<Box> out;
  out.reserve(static_cast<std::size_t>(total()));
  for (const auto& level : levels) out.insert(out.end(), level.begin(), level.end());
  return out;
}

AnchorSet generate_anchors(const AnchorConfig& config, std::int64_t height, std::int64_t width) {
  config.validate();
  int max_stride = 0;
  for (const int s : config.strides) max_stride = std::max(max_stride, s);
  if (height <= 0 || width <= 0 || height % max_stride != 0 || width % max_stride != 0) {
    throw ConfigError("generate_anchors: input " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by stride " + std::to_string(max_stride));
  }
  AnchorSet set;
  set.anchors_per_cell = config.anchors_per_cell();
  // Cell-independent anchor shapes.
  std::vector<std::pair<double, double>> shapes;  // (w, h) at unit base size
  for (const double r : config.ratios) {
    for (const double s : config.scales) shapes.emplace_back(s / std::sqrt(r), s * std::sqrt(r));
  }
  for (std::size_t l = 0; l < config.strides.size(); ++l) {
    const int stride = config.strides[l];
    const std::int64_t lh = height / stride, lw = width / stride;
    std::vector<Box> level;
    level.reserve(static_cast<std::size_t>(lh * lw) * shapes.size());
    for (std::int64_t i = 0; i < lh; ++i) {
      const double cy = stride * (static_cast<double>(i) + 0.5);
      for (std::int64_t j = 0; j < lw; ++j) {
        const double cx = stride * (static_cast<double>(j) + 0.5);
        for (const auto& [uw, uh] : shapes) {
          const double hw = 0.5 * uw * config.base_sizes[l], hh = 0.5 * uh * config.base_sizes[l];
          level.push_back({cx - hw, cy - hh, cx + hw, cy + hh});
        }
      }
    }
    set.levels.push_back(std::move(level));
    set.heights.push_back(lh);
    set.widths.push_back(lw);
  }
  return set;
}

std::int64_t AssignmentResult::num_positive() const {
  std::int64_t n = 0;
  for (const int l : labels) n += l > 0;
  return n;
}

std::int64_t AssignmentResult::num_ignored() const {
  std::int64_t n = 0;
  for (const int l : labels) n += l == kLabelIgnore;
  return n;
}

AssignmentResult assign_targets(const std::vector<Box>& anchors, const std::vector<GroundTruth>& ground_truth,
                                const AssignConfig& config) {
  const std::size_t na = anchors.size(), ng = ground_truth.size();
  AssignmentResult r;
  r.labels.assign(na, kLabelBackground);
  r.matched_gt.assign(na, -1);
  r.targets.assign(na, {0, 0, 0, 0});
  if (ng == 0) return r;

  std::vector<double> best_iou(na, -1.0);
  std::vector<int> best_gt(na, -1);
  std::vector<double> gt_best_iou(ng, 0.0);
  std::vector<std::int64_t> gt_best_anchor(ng, -1);
  for (std::size_t a = 0; a < na; ++a) {
    for (std::size_t g = 0; g < ng; ++g) {
      const double v = iou(anchors[a], ground_truth[g].box);
      if (v > best_iou[a]) {
        best_iou[a] = v;
        best_gt[a] = static_cast<int>(g);
      }
      if (v > gt_best_iou[g]) {
        gt_best_iou[g] = v;
        gt_best_anchor[g] = static_cast<std::int64_t>(a);
      }
    }
  }
  for (std::size_t a = 0; a < na; ++a) {
    if (best_iou[a] >= config.positive_iou) {
      r.matched_gt[a] = best_gt[a];
    } else if (best_iou[a] >= config.negative_iou) {
      r.labels[a] = kLabelIgnore;
    }
  }
  for (std::size_t g = 0; g < ng; ++g) {
    if (gt_best_anchor[g] >= 0) r.matched_gt[static_cast<std::size_t>(gt_best_anchor[g])] = static_cast<int>(g);
  }
  for (std::size_t a = 0; a < na; ++a) {
    const int g = r.matched_gt[a];
    if (g < 0) continue;
    r.labels[a] = ground_truth[static_cast<std::size_t>(g)].class_id;
    r.targets[a] = encode_box(anchors[a], ground_truth[static_cast<std::size_t>(g)].box);
  }
  return r;
}

std::array<double, 4> encode_box(const Box& anchor, const Box& gt) {
  require_positive(anchor, "encode_box");
  const double wa = anchor.width(), ha = anchor.height();
  return {(gt.cx() - anchor.cx()) / wa, (gt.cy() - anchor.cy()) / ha, std::log(gt.width() / wa),
          std::log(gt.height() / ha)};
}

Box decode_box(const Box& anchor, const std::array<double, 4>& d) {
  require_positive(anchor, "decode_box");
  const double wa = anchor.width(), ha = anchor.height();
  const double cx = anchor.cx() + d[0] * wa, cy = anchor.cy() + d[1] * ha;
  const double w = wa * std::exp(std::min(d[2], kMaxLogScale));
  const double h = ha * std::exp(std::min(d[3], kMaxLogScale));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

}  // namespace pdse
