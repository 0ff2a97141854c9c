#include "pdse/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <thread>

#include "pdse/rng.hpp"

namespace pdse {

namespace fs = std::filesystem;

namespace {

// Runs body(i) for i in [0, n) on up to `threads` workers. Each index is
// handled by exactly one worker, so results written per index do not depend
// on scheduling.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&, w] {
      NoGradGuard guard;
      try {
        for (std::size_t i = w; i < n; i += workers) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

BasicTensor<float> flatten_levels(const std::vector<BasicTensor<float>>& per_level, std::int64_t anchors_per_cell,
                                  std::int64_t width) {
  std::vector<BasicTensor<float>> parts;
  for (const auto& t : per_level) parts.push_back(ops::to_anchor_major(t, anchors_per_cell));
  auto joined = parts.size() == 1 ? parts[0] : ops::concat(parts, 1);
  return ops::reshape(joined, {joined.dim(0) * joined.dim(1), width});
}

BasicTensor<float> stack_images(const std::vector<const BasicTensor<float>*>& images) {
  const auto& first = *images.front();
  const auto h = first.dim(1), w = first.dim(2);
  std::vector<float> values;
  values.reserve(images.size() * static_cast<std::size_t>(h * w));
  for (const auto* img : images) {
    if (img->dim(1) != h || img->dim(2) != w) throw ShapeError("batch images differ in size");
    values.insert(values.end(), img->data().begin(), img->data().end());
  }
  return BasicTensor<float>({static_cast<std::int64_t>(images.size()), 1, h, w}, std::move(values));
}

// Names the first parameter holding a non-finite value, else the one with the
// largest magnitude (the usual culprit when a forward overflows).
std::string suspect_parameter(const ParameterStore<float>& store) {
  std::string largest;
  double largest_abs = -1.0;
  for (const auto& p : store.parameters()) {
    for (const float v : p.tensor.data()) {
      if (!std::isfinite(v)) return "first non-finite parameter '" + p.name + "'";
      if (std::abs(v) > largest_abs) largest_abs = std::abs(v), largest = p.name;
    }
  }
  return "largest parameter '" + largest + "' (|value| " + std::to_string(largest_abs) + ")";
}

struct Sample {
  std::string id;
  BasicTensor<float> image;  // [1,H,W]
  std::vector<GroundTruth> annotations;
};

std::vector<Sample> load_samples(const Dataset& dataset, const std::vector<std::string>& ids) {
  std::vector<Sample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const auto slice = dataset.load(id);
    out.push_back({id, hu_normalize<float>(slice), slice.annotations});
  }
  return out;
}

std::vector<ImageAnnotations> annotations_of(const Dataset& dataset, const std::vector<std::string>& ids) {
  std::vector<ImageAnnotations> out;
  for (const auto& id : ids) {
    const auto it = dataset.annotations.find(id);
    out.push_back({id, it == dataset.annotations.end() ? std::vector<GroundTruth>{} : it->second});
  }
  return out;
}

nlohmann::ordered_json epoch_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},
          {"learning_rate", m.learning_rate},
          {"loss", m.loss},
          {"classification_loss", m.classification_loss},
          {"box_loss", m.box_loss},
          {"steps", m.steps},
          {"val_map", m.val_map},
          {"seconds", m.seconds}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

}  // namespace

DetectionLoss detection_loss(const HeadOutputs<float>& outputs, const AnchorSet& anchors,
                             const std::vector<std::vector<GroundTruth>>& ground_truth, const ModelConfig& config) {
  const auto a = config.anchors_per_cell();
  const auto logits = flatten_levels(outputs.class_logits, a, config.num_classes);
  const auto deltas = flatten_levels(outputs.box_deltas, a, 4);
  const auto per_image = anchors.total();
  if (logits.dim(0) != per_image * static_cast<std::int64_t>(ground_truth.size())) {
    throw ShapeError("detection_loss: head outputs cover " + std::to_string(logits.dim(0)) + " anchors, expected " +
                     std::to_string(per_image) + " per image for " + std::to_string(ground_truth.size()) + " images");
  }
  const auto flat = anchors.flat();
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(logits.dim(0)));
  std::vector<std::int64_t> positives;
  std::vector<std::array<double, 4>> targets;
  for (std::size_t b = 0; b < ground_truth.size(); ++b) {
    const auto assignment = assign_targets(flat, ground_truth[b]);
    labels.insert(labels.end(), assignment.labels.begin(), assignment.labels.end());
    for (std::size_t i = 0; i < assignment.labels.size(); ++i) {
      if (assignment.labels[i] > 0) {
        positives.push_back(static_cast<std::int64_t>(b) * per_image + static_cast<std::int64_t>(i));
        targets.push_back(assignment.targets[i]);
      }
    }
  }
  DetectionLoss loss;
  auto focal = focal_loss(logits, labels, config.focal);
  loss.classification = focal.loss;
  loss.num_positive = focal.num_positive;
  loss.box = box_regression_loss(deltas, positives, targets);
  loss.total = ops::add(loss.classification, ops::scale(loss.box, static_cast<float>(config.box_loss_weight)));
  return loss;
}

LoadedModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  LoadedModel model;
  model.config = config;
  model.store = ParameterStore<float>(seed);
  model.params = build_model(config, model.store);
  model.metadata = nlohmann::ordered_json::object();
  return model;
}

void SgdOptimizer::step(ParameterStore<float>& store, double learning_rate, double grad_scale) {
  const auto& params = store.parameters();
  if (velocity_.size() != params.size()) {
    velocity_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i].tensor.data().size(), 0.0f);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto tensor = params[i].tensor;
    if (!tensor.has_grad()) continue;
    auto values = tensor.mutable_data();
    const auto grad = tensor.grad();
    auto& vel = velocity_[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double g = grad_scale * grad[k] + weight_decay_ * values[k];
      vel[k] = static_cast<float>(momentum_ * vel[k] + g);
      values[k] = static_cast<float>(values[k] - learning_rate * vel[k]);
    }
  }
}

double gradient_norm(const ParameterStore<float>& store) {
  double sq = 0.0;
  for (const auto& p : store.parameters()) {
    if (!p.tensor.has_grad()) continue;
    for (const float g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
      sq += static_cast<double>(g) * g;
    }
  }
  return std::sqrt(sq);
}

double scheduled_learning_rate(const TrainConfig& config, int epoch, std::int64_t iteration) {
  double lr = config.learning_rate;
  for (const int e : config.lr_decay_epochs)
    if (epoch >= e) lr *= config.lr_decay_factor;
  if (iteration < config.warmup_iterations) {
    lr *= static_cast<double>(iteration + 1) / static_cast<double>(config.warmup_iterations);
  }
  return lr;
}

std::vector<std::vector<Detection>> detect(const LoadedModel& model, const std::vector<BasicTensor<float>>& images,
                                           const PostprocessConfig& config, int threads) {
  std::vector<std::vector<Detection>> out(images.size());
  parallel_for(images.size(), threads, [&](std::size_t i) {
    NoGradGuard guard;
    const auto& img = images[i];
    if (img.rank() != 3 || img.dim(0) != 1) throw ShapeError("detect: expected [1,H,W], got " + shape_str(img.shape()));
    const auto h = img.dim(1), w = img.dim(2);
    const auto anchors = generate_anchors(model.config.anchors, h, w);
    const auto outputs = model_forward(ops::reshape(img, {1, 1, h, w}), model.config, model.params, false);
    out[i] = postprocess(outputs, anchors, model.config.num_classes, static_cast<double>(w), static_cast<double>(h),
                         config)[0];
  });
  return out;
}

EvalReport evaluate_model(const LoadedModel& model, const Dataset& dataset, const std::vector<std::string>& ids,
                          const PostprocessConfig& config, int threads) {
  std::vector<ImageDetections> detections(ids.size());
  parallel_for(ids.size(), threads, [&](std::size_t i) {
    const auto image = hu_normalize<float>(dataset.load(ids[i]));
    detections[i] = {ids[i], detect(model, {image}, config, 1)[0]};
  });
  return evaluate_map(detections, annotations_of(dataset, ids));
}

std::vector<std::uint8_t> render_overlay(const CTSlice& slice, const std::vector<Detection>& detections) {
  static constexpr std::uint8_t kColours[kNumLesionClasses][3] = {
      {230, 25, 75}, {60, 180, 75}, {255, 225, 25}, {0, 130, 200}, {245, 130, 48},
      {145, 30, 180}, {70, 240, 240}, {240, 50, 230}, {210, 245, 60}};
  const auto h = slice.height, w = slice.width;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h * w * 3));
  for (std::size_t i = 0; i < slice.pixels.size(); ++i) {
    const auto v = static_cast<std::uint8_t>(std::lround(255.0 * hu_normalize_value(slice.pixels[i])));
    rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = v;
  }
  const auto paint = [&](std::int64_t x, std::int64_t y, const std::uint8_t* c) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    auto* px = &rgb[static_cast<std::size_t>((y * w + x) * 3)];
    px[0] = c[0], px[1] = c[1], px[2] = c[2];
  };
  for (const auto& d : detections) {
    const auto* c = kColours[std::clamp(d.class_id, 1, kNumLesionClasses) - 1];
    const auto x1 = static_cast<std::int64_t>(std::floor(d.box.x1)), y1 = static_cast<std::int64_t>(std::floor(d.box.y1));
    const auto x2 = static_cast<std::int64_t>(std::ceil(d.box.x2)) - 1, y2 = static_cast<std::int64_t>(std::ceil(d.box.y2)) - 1;
    for (auto x = x1; x <= x2; ++x) paint(x, y1, c), paint(x, y2, c);
    for (auto y = y1; y <= y2; ++y) paint(x1, y, c), paint(x2, y, c);
  }
  return rgb;
}

RunArtifacts train(const TrainConfig& config, const std::function<void(const EpochMetrics&)>& on_epoch) {
  config.validate();
  const int threads = resolve_threads(config.threads);
  const auto dataset = load_dataset(config.dataset);

  auto train_ids = dataset.split(config.train_split);
  if (config.max_train_images > 0 && static_cast<std::size_t>(config.max_train_images) < train_ids.size()) {
    train_ids.resize(static_cast<std::size_t>(config.max_train_images));
  }
  if (train_ids.empty()) throw ConfigError("train: split '" + config.train_split + "' is empty");
  auto val_ids = dataset.split(config.val_split);
  if (val_ids.empty()) val_ids = train_ids;

  const auto samples = load_samples(dataset, train_ids);
  const auto height = samples.front().image.dim(1), width = samples.front().image.dim(2);
  for (const auto& s : samples) {
    if (s.image.dim(1) != height || s.image.dim(2) != width) throw DataError("train: images differ in size");
  }
  const auto anchors = generate_anchors(config.model.anchors, height, width);
  auto model = init_model(config.model, config.seed);
  SgdOptimizer optimizer(config.momentum, config.weight_decay);

  RunArtifacts run;
  run.output_dir = config.output_dir;
  fs::create_directories(run.output_dir);
  run.best_checkpoint = run.output_dir / "best.ckpt";
  run.last_checkpoint = run.output_dir / "last.ckpt";
  run.metrics_log = run.output_dir / "metrics.jsonl";
  write_text(run.output_dir / "config.json", train_config_to_json(config).dump(2) + "\n");
  write_text(run.metrics_log, "");

  const AugmentConfig augment_cfg{0.6, height, 0.25};
  const bool can_augment = config.augment && height == width;
  // The output location is not part of the run's identity: two runs that
  // differ only in where they write produce identical checkpoints.
  auto stored_config = train_config_to_json(config);
  stored_config.erase("output_dir");
  std::int64_t iteration = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(config.seed, "epoch/" + std::to_string(epoch)));
    shuffle_rng.shuffle(order);

    EpochMetrics metrics;
    metrics.epoch = epoch;
    double loss_sum = 0.0, cls_sum = 0.0, box_sum = 0.0;
    for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(config.batch_size)) {
      const auto last = std::min(order.size(), first + static_cast<std::size_t>(config.batch_size));
      std::vector<BasicTensor<float>> views;
      std::vector<std::vector<GroundTruth>> gts;
      for (auto k = first; k < last; ++k) {
        const auto& s = samples[order[k]];
        Rng view_rng(derive_seed(config.seed, "augment/" + std::to_string(epoch) + "/" + s.id));
        if (can_augment && view_rng.uniform() >= config.augment_full_probability) {
          auto crops = five_area_augment(s.image, s.annotations, augment_cfg);
          if (!crops.empty()) {
            auto& pick = crops[view_rng.below(crops.size())];
            views.push_back(pick.image);
            gts.push_back(pick.annotations);
            continue;
          }
        }
        views.push_back(s.image);
        gts.push_back(s.annotations);
      }
      std::vector<const BasicTensor<float>*> ptrs;
      for (const auto& v : views) ptrs.push_back(&v);
      const auto batch = stack_images(ptrs);

      DetectionLoss loss;
      try {
        const auto outputs = model_forward(batch, model.config, model.params, true);
        loss = detection_loss(outputs, anchors, gts, model.config);
      } catch (const NonFiniteError& e) {
        throw TrainingError("non-finite forward value at epoch " + std::to_string(epoch) + ", iteration " +
                            std::to_string(iteration) + ": " + e.what() + "; " + suspect_parameter(model.store));
      }
      const double total = loss.total.item();
      if (!std::isfinite(total)) {
        throw TrainingError("non-finite loss at iteration " + std::to_string(iteration) + "; " +
                            suspect_parameter(model.store));
      }
      loss.total.backward();
      const double norm = gradient_norm(model.store);
      const double clip = config.grad_clip_norm > 0.0 && norm > config.grad_clip_norm ? config.grad_clip_norm / norm : 1.0;
      metrics.learning_rate = scheduled_learning_rate(config, epoch, iteration);
      optimizer.step(model.store, metrics.learning_rate, clip);
      model.store.zero_grad();

      loss_sum += total;
      cls_sum += loss.classification.item();
      box_sum += loss.box.item();
      ++metrics.steps;
      ++iteration;
    }
    metrics.loss = loss_sum / metrics.steps;
    metrics.classification_loss = cls_sum / metrics.steps;
    metrics.box_loss = box_sum / metrics.steps;
    metrics.val_map = evaluate_model(model, dataset, val_ids, config.postprocess, threads).map;
    metrics.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    model.metadata = {{"epoch", epoch},
                      {"val_map", metrics.val_map},
                      {"seed", config.seed},
                      {"dataset", config.dataset},
                      {"dataset_hash", dataset.manifest.content_hash},
                      {"train_config", stored_config}};
    save_checkpoint(run.last_checkpoint, model);
    if (metrics.val_map > run.best_val_map) {
      run.best_val_map = metrics.val_map;
      run.best_epoch = epoch;
      save_checkpoint(run.best_checkpoint, model);
    }
    {
      std::ofstream log(run.metrics_log, std::ios::app);
      log << epoch_json(metrics).dump() << '\n';
    }
    run.history.push_back(metrics);
    if (on_epoch) on_epoch(metrics);
  }

  const auto& test_ids = dataset.split(config.test_split);
  if (config.evaluate_test && !test_ids.empty()) {
    const auto best = load_checkpoint(run.best_checkpoint);
    run.test_report = evaluate_model(best, dataset, test_ids, config.postprocess, threads);
    write_text(run.output_dir / "test_report.json", report_to_json(*run.test_report) + "\n");
    write_text(run.output_dir / "test_report.txt", report_to_table(*run.test_report));
  }
  return run;
}

AblationResult run_ablation(const TrainConfig& base,
                            const std::function<void(const std::string&, const EpochMetrics&)>& on_epoch) {
  struct Variant {
    const char* column;
    bool panet, dse;
  };
  static constexpr Variant kVariants[] = {{"RetinaNet", false, false}, {"RetinaNet-PA", true, false}, {"Ours", true, true}};
  AblationResult result;
  nlohmann::ordered_json summary;
  summary["seed"] = base.seed;
  summary["variants"] = nlohmann::ordered_json::array();
  for (const auto& v : kVariants) {
    TrainConfig cfg = base;
    cfg.model.use_panet = v.panet;
    cfg.model.use_dse = v.dse;
    cfg.evaluate_test = true;
    cfg.output_dir = (fs::path(base.output_dir) / v.column).string();
    auto run = train(cfg, [&](const EpochMetrics& m) {
      if (on_epoch) on_epoch(v.column, m);
    });
    if (!run.test_report) {
      // No test split: score the best checkpoint on the validation split.
      const auto dataset = load_dataset(cfg.dataset);
      auto ids = dataset.split(cfg.val_split);
      if (ids.empty()) ids = dataset.split(cfg.train_split);
      run.test_report = evaluate_model(load_checkpoint(run.best_checkpoint), dataset, ids, cfg.postprocess,
                                       resolve_threads(cfg.threads));
    }
    result.columns.emplace_back(v.column);
    result.reports.push_back(*run.test_report);
    summary["variants"].push_back({{"column", v.column},
                                   {"use_panet", v.panet},
                                   {"use_dse", v.dse},
                                   {"best_epoch", run.best_epoch},
                                   {"best_val_map", run.best_val_map},
                                   {"checkpoint", run.best_checkpoint.string()},
                                   {"checkpoint_hash", file_hash(run.best_checkpoint)},
                                   {"test_map", run.test_report->map}});
    result.runs.push_back(std::move(run));
  }
  result.table = comparison_table(result.columns, result.reports);
  const double gap = result.reports[2].map - result.reports[0].map;
  summary["full_minus_baseline_map"] = gap;
  fs::create_directories(base.output_dir);
  write_text(fs::path(base.output_dir) / "ablation.json", summary.dump(2) + "\n");
  write_text(fs::path(base.output_dir) / "ablation.txt", result.table);
  return result;
}

}  // namespace pdse
