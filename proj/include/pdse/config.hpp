#pragma once

// JSON schema of the model and training configurations. Unknown keys are
// rejected; missing keys keep their defaults.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "pdse/network.hpp"
#include "pdse/postprocess.hpp"

namespace pdse {

struct TrainConfig {
  ModelConfig model;
  std::string dataset;  // path to manifest.json
  std::string output_dir = "runs/default";
  int epochs = 30;
  int batch_size = 4;
  std::uint64_t seed = 1;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<int> lr_decay_epochs;  // lr *= lr_decay_factor at the start of each listed epoch
  double lr_decay_factor = 0.1;
  int warmup_iterations = 100;       // linear ramp from lr / warmup
  double grad_clip_norm = 10.0;      // global L2 norm; 0 disables
  bool augment = true;
  double augment_full_probability = 0.5;  // otherwise a random retained five-area crop
  int threads = 1;                   // capped by PDSE_THREADS
  std::string train_split = "train";
  std::string val_split = "val";
  std::string test_split = "test";
  int max_train_images = 0;          // first N ids of the train split; 0 keeps all
  PostprocessConfig postprocess;
  bool evaluate_test = true;

  /// Throws ConfigError.
  void validate() const;
};

nlohmann::ordered_json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::ordered_json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Reads and validates a training config file. Throws ConfigError.
TrainConfig load_train_config(const std::string& path);

/// min(requested, PDSE_THREADS) when the variable is set; at least 1.
int resolve_threads(int requested);

}  // namespace pdse
