#include "pdse/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>

namespace pdse {

namespace {

using Setter = std::function<void(const nlohmann::json&)>;

// Applies one setter per key of `j`; unknown keys and type mismatches are
// reported with the dotted path of the key.
void apply_fields(const nlohmann::json& j, const std::string& where, const std::map<std::string, Setter>& setters) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError(where + ": unknown key '" + key + "'");
    try {
      it->second(value);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where + "." + key + ": " + e.what());
    }
  }
}

template <typename V>
Setter set(V& field) {
  return [&field](const nlohmann::json& v) { field = v.get<V>(); };
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (learning_rate < 0.0) throw ConfigError("train config: negative learning rate");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train config: momentum outside [0,1)");
  if (weight_decay < 0.0) throw ConfigError("train config: negative weight decay");
  if (lr_decay_factor <= 0.0) throw ConfigError("train config: lr_decay_factor must be positive");
  if (warmup_iterations < 0) throw ConfigError("train config: negative warmup");
  if (grad_clip_norm < 0.0) throw ConfigError("train config: negative grad_clip_norm");
  if (augment_full_probability < 0.0 || augment_full_probability > 1.0) {
    throw ConfigError("train config: augment_full_probability outside [0,1]");
  }
  if (threads < 1) throw ConfigError("train config: threads must be >= 1");
  if (max_train_images < 0) throw ConfigError("train config: negative max_train_images");
  if (dataset.empty()) throw ConfigError("train config: dataset manifest path is required");
  if (postprocess.score_thresh < 0.0 || postprocess.score_thresh >= 1.0 || postprocess.pre_nms_topk < 1 ||
      postprocess.max_dets < 1 || postprocess.nms_iou <= 0.0 || postprocess.nms_iou > 1.0) {
    throw ConfigError("train config: invalid postprocess settings");
  }
}

nlohmann::ordered_json model_config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["use_panet"] = c.use_panet;
  j["use_dse"] = c.use_dse;
  j["include_low_level"] = c.include_low_level;
  j["backbone_blocks"] = c.backbone_blocks;
  j["backbone_widths"] = c.backbone_widths;
  j["stem_width"] = c.stem_width;
  j["pyramid_width"] = c.pyramid_width;
  j["head_depth"] = c.head_depth;
  j["head_width"] = c.head_width;
  j["num_classes"] = c.num_classes;
  j["se_reduction"] = c.se_reduction;
  j["dse_levels"] = c.dse_levels;
  j["anchors"] = {{"strides", c.anchors.strides},
                  {"base_sizes", c.anchors.base_sizes},
                  {"scales", c.anchors.scales},
                  {"ratios", c.anchors.ratios}};
  j["focal"] = {{"alpha", c.focal.alpha}, {"gamma", c.focal.gamma}};
  j["box_loss_weight"] = c.box_loss_weight;
  j["prior_probability"] = c.prior_probability;
  j["zero_init_aggregation"] = c.zero_init_aggregation;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  apply_fields(j, "model",
               {{"use_panet", set(c.use_panet)},
                {"use_dse", set(c.use_dse)},
                {"include_low_level", set(c.include_low_level)},
                {"backbone_blocks", set(c.backbone_blocks)},
                {"backbone_widths", set(c.backbone_widths)},
                {"stem_width", set(c.stem_width)},
                {"pyramid_width", set(c.pyramid_width)},
                {"head_depth", set(c.head_depth)},
                {"head_width", set(c.head_width)},
                {"num_classes", set(c.num_classes)},
                {"se_reduction", set(c.se_reduction)},
                {"dse_levels", set(c.dse_levels)},
                {"anchors",
                 [&c](const nlohmann::json& v) {
                   apply_fields(v, "model.anchors",
                                {{"strides", set(c.anchors.strides)},
                                 {"base_sizes", set(c.anchors.base_sizes)},
                                 {"scales", set(c.anchors.scales)},
                                 {"ratios", set(c.anchors.ratios)}});
                 }},
                {"focal",
                 [&c](const nlohmann::json& v) {
                   apply_fields(v, "model.focal", {{"alpha", set(c.focal.alpha)}, {"gamma", set(c.focal.gamma)}});
                 }},
                {"box_loss_weight", set(c.box_loss_weight)},
                {"prior_probability", set(c.prior_probability)},
                {"zero_init_aggregation", set(c.zero_init_aggregation)}});
  c.validate();
  return c;
}

nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = model_config_to_json(c.model);
  j["dataset"] = c.dataset;
  j["output_dir"] = c.output_dir;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["learning_rate"] = c.learning_rate;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["lr_decay_epochs"] = c.lr_decay_epochs;
  j["lr_decay_factor"] = c.lr_decay_factor;
  j["warmup_iterations"] = c.warmup_iterations;
  j["grad_clip_norm"] = c.grad_clip_norm;
  j["augment"] = c.augment;
  j["augment_full_probability"] = c.augment_full_probability;
  j["threads"] = c.threads;
  j["train_split"] = c.train_split;
  j["val_split"] = c.val_split;
  j["test_split"] = c.test_split;
  j["max_train_images"] = c.max_train_images;
  j["postprocess"] = {{"score_thresh", c.postprocess.score_thresh},
                      {"pre_nms_topk", c.postprocess.pre_nms_topk},
                      {"nms_iou", c.postprocess.nms_iou},
                      {"max_dets", c.postprocess.max_dets}};
  j["evaluate_test"] = c.evaluate_test;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  apply_fields(j, "train",
               {{"model", [&c](const nlohmann::json& v) { c.model = model_config_from_json(v); }},
                {"dataset", set(c.dataset)},
                {"output_dir", set(c.output_dir)},
                {"epochs", set(c.epochs)},
                {"batch_size", set(c.batch_size)},
                {"seed", set(c.seed)},
                {"learning_rate", set(c.learning_rate)},
                {"momentum", set(c.momentum)},
                {"weight_decay", set(c.weight_decay)},
                {"lr_decay_epochs", set(c.lr_decay_epochs)},
                {"lr_decay_factor", set(c.lr_decay_factor)},
                {"warmup_iterations", set(c.warmup_iterations)},
                {"grad_clip_norm", set(c.grad_clip_norm)},
                {"augment", set(c.augment)},
                {"augment_full_probability", set(c.augment_full_probability)},
                {"threads", set(c.threads)},
                {"train_split", set(c.train_split)},
                {"val_split", set(c.val_split)},
                {"test_split", set(c.test_split)},
                {"max_train_images", set(c.max_train_images)},
                {"postprocess",
                 [&c](const nlohmann::json& v) {
                   apply_fields(v, "train.postprocess",
                                {{"score_thresh", set(c.postprocess.score_thresh)},
                                 {"pre_nms_topk", set(c.postprocess.pre_nms_topk)},
                                 {"nms_iou", set(c.postprocess.nms_iou)},
                                 {"max_dets", set(c.postprocess.max_dets)}});
                 }},
                {"evaluate_test", set(c.evaluate_test)}});
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  auto config = train_config_from_json(j);
  // A relative dataset path is resolved against the config file's directory.
  const std::filesystem::path ds(config.dataset);
  if (ds.is_relative()) config.dataset = (std::filesystem::path(path).parent_path() / ds).lexically_normal().string();
  return config;
}

int resolve_threads(int requested) {
  int n = std::max(1, requested);
  if (const char* env = std::getenv("PDSE_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && cap >= 1) n = std::min<long>(n, cap);
  }
  return n;
}

}  // namespace pdse
