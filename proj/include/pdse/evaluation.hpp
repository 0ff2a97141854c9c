#pragma once

// Per-lesion-type average precision and mAP, the detections CSV, and the
// report renderings.

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pdse/anchors.hpp"
#include "pdse/postprocess.hpp"

namespace pdse {

/// Lesion type names indexed by class id - 1.
extern const std::array<const char*, kNumLesionClasses> kLesionTypeNames;
/// Class ids in table row order: Bone, Abdomen, Mediastinum, Liver, Lung,
/// Kidney, Tissue, Pelvis, Other.
extern const std::array<int, kNumLesionClasses> kTableRowOrder;
/// Row labels matching kTableRowOrder.
extern const std::array<const char*, kNumLesionClasses> kTableRowLabels;

enum class Interpolation { kAllPoints, kElevenPoint };

struct EvalConfig {
  double iou_thresh = 0.5;
  Interpolation interpolation = Interpolation::kAllPoints;
};

/// One detection of a single class, tagged with its image index.
struct ClassDetection {
  std::size_t image = 0;
  Box box;
  double score = 0.0;
};

struct PrCurve {
  std::vector<double> precision;
  std::vector<double> recall;
  /// Empty when the class has no ground truth.
  std::optional<double> ap;
};

/// Detections are visited by (score desc, index asc); each takes the unmatched
/// ground truth of its image with the highest IoU >= iou_thresh (lowest index
/// on ties), otherwise counts as a false positive.
PrCurve precision_recall(const std::vector<ClassDetection>& detections,
                         const std::vector<std::vector<Box>>& ground_truth, const EvalConfig& config = {});

/// Area under the precision envelope (or the 11-point mean). nullopt when
/// there is no ground truth.
std::optional<double> average_precision(const std::vector<ClassDetection>& detections,
                                        const std::vector<std::vector<Box>>& ground_truth,
                                        const EvalConfig& config = {});

struct ImageAnnotations {
  std::string image_id;
  std::vector<GroundTruth> boxes;
};

struct ImageDetections {
  std::string image_id;
  std::vector<Detection> detections;
};

struct EvalReport {
  std::array<std::optional<double>, kNumLesionClasses> ap{};  // by class id - 1
  std::array<PrCurve, kNumLesionClasses> curves{};
  std::array<std::int64_t, kNumLesionClasses> num_ground_truth{};
  std::array<std::int64_t, kNumLesionClasses> num_detections{};
  /// Mean over classes with at least one ground truth; 0 when there are none.
  double map = 0.0;
  std::int64_t num_images = 0;
};

/// Throws std::invalid_argument on unknown class ids, duplicate image ids,
/// or detections for images without an annotation record.
EvalReport evaluate_map(const std::vector<ImageDetections>& detections,
                        const std::vector<ImageAnnotations>& annotations, const EvalConfig& config = {});

std::string report_to_json(const EvalReport& report, bool include_curves = true);
/// Nine lesion-type rows in table order plus an mAP row.
std::string report_to_table(const EvalReport& report);
/// One column per report, e.g. "RetinaNet", "RetinaNet-PA", "Ours".
std::string comparison_table(const std::vector<std::string>& columns, const std::vector<EvalReport>& reports);

/// CSV with header `image_id,class_id,score,x1,y1,x2,y2`; numbers use the
/// shortest round-trip representation.
void write_detections_csv(std::ostream& out, const std::vector<ImageDetections>& detections);
/// Inverse of write_detections_csv; images appear in first-seen order.
std::vector<ImageDetections> read_detections_csv(std::istream& in);

}  // namespace pdse
