#pragma once

// Training loop, evaluation, detection and the three-variant ablation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdse/checkpoint.hpp"
#include "pdse/config.hpp"
#include "pdse/data.hpp"
#include "pdse/evaluation.hpp"
#include "pdse/postprocess.hpp"

namespace pdse {

/// Raised when the loss or a gradient stops being finite.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DetectionLoss {
  Tensor total;           // classification + box_loss_weight * box
  Tensor classification;  // focal, normalized by max(1, positives)
  Tensor box;             // smooth-L1 over positive anchors
  std::int64_t num_positive = 0;
};

/// Loss of a batch. `ground_truth[b]` are the boxes of image b, in input
/// pixel coordinates.
DetectionLoss detection_loss(const HeadOutputs<float>& outputs, const AnchorSet& anchors,
                             const std::vector<std::vector<GroundTruth>>& ground_truth, const ModelConfig& config);

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double learning_rate = 0.0;  // at the last step of the epoch
  double loss = 0.0;           // means over steps
  double classification_loss = 0.0;
  double box_loss = 0.0;
  int steps = 0;
  double val_map = 0.0;
  double seconds = 0.0;
};

struct RunArtifacts {
  std::filesystem::path output_dir;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::filesystem::path metrics_log;  // JSON lines, one per epoch
  std::vector<EpochMetrics> history;
  int best_epoch = 0;
  double best_val_map = -1.0;
  std::optional<EvalReport> test_report;
};

/// Fresh model for a configuration, parameters seeded per name.
LoadedModel init_model(const ModelConfig& config, std::uint64_t seed);

/// SGD with momentum and coupled weight decay; state is one velocity per
/// parameter.
class SgdOptimizer {
 public:
  SgdOptimizer(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  /// Applies one update to every parameter of the store that holds a
  /// gradient. `grad_scale` multiplies the raw gradients first.
  void step(ParameterStore<float>& store, double learning_rate, double grad_scale = 1.0);

 private:
  double momentum_, weight_decay_;
  std::vector<std::vector<float>> velocity_;
};

/// Global L2 norm of the stored gradients. Throws TrainingError naming the
/// first parameter whose gradient is not finite.
double gradient_norm(const ParameterStore<float>& store);

/// Learning rate after `iteration` steps, during (1-based) `epoch`.
double scheduled_learning_rate(const TrainConfig& config, int epoch, std::int64_t iteration);

/// Runs the configured epochs, keeps best.ckpt (by validation mAP) and
/// last.ckpt, appends metrics.jsonl, and evaluates the best checkpoint on
/// the test split when configured.
RunArtifacts train(const TrainConfig& config, const std::function<void(const EpochMetrics&)>& on_epoch = {});

/// Normalized images [1,H,W] with their detections, one image per forward.
std::vector<std::vector<Detection>> detect(const LoadedModel& model, const std::vector<BasicTensor<float>>& images,
                                           const PostprocessConfig& config, int threads = 1);

EvalReport evaluate_model(const LoadedModel& model, const Dataset& dataset, const std::vector<std::string>& ids,
                          const PostprocessConfig& config, int threads = 1);

/// 8-bit RGB rendering of a slice (HU window [-1024, 3071]) with one
/// rectangle per detection in its class colour.
std::vector<std::uint8_t> render_overlay(const CTSlice& slice, const std::vector<Detection>& detections);

struct AblationResult {
  std::vector<std::string> columns;  // RetinaNet, RetinaNet-PA, Ours
  std::vector<RunArtifacts> runs;
  std::vector<EvalReport> reports;  // test split, best checkpoint of each run
  std::string table;
};

/// Trains (use_panet, use_dse) = (F,F), (T,F), (T,T) with the base
/// config's seed and schedule under output_dir/<column>.
AblationResult run_ablation(const TrainConfig& base, const std::function<void(const std::string&, const EpochMetrics&)>& on_epoch = {});

}  // namespace pdse
