#include "pdse/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "pdse/gradient_suite.hpp"
#include "pdse/trainer.hpp"

namespace pdse {

namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

// Postprocessing recorded with the checkpoint's training run, else defaults.
PostprocessConfig checkpoint_postprocess(const LoadedModel& model) {
  if (model.metadata.contains("train_config")) {
    auto cfg = nlohmann::json::parse(model.metadata["train_config"].dump());
    return train_config_from_json(cfg).postprocess;
  }
  return {};
}

std::string epoch_line(const EpochMetrics& m) {
  char buf[200];
  std::snprintf(buf, sizeof buf, "epoch %3d  lr %.5f  loss %.4f (cls %.4f box %.4f)  val mAP %.4f  %.1fs", m.epoch,
                m.learning_rate, m.loss, m.classification_loss, m.box_loss, m.val_map, m.seconds);
  return buf;
}

int cmd_generate(const std::string& spec_path, std::ostream& out) {
  auto spec = phantom_spec_from_json(read_text(spec_path));
  const auto base = fs::path(spec_path).parent_path();
  if (fs::path(spec.output_dir).is_relative()) spec.output_dir = (base / spec.output_dir).string();
  const auto manifest = generate_phantoms(spec);
  out << "wrote " << manifest.image_ids.size() << " phantoms to " << spec.output_dir << " (train "
      << manifest.split.train.size() << ", val " << manifest.split.val.size() << ", test " << manifest.split.test.size()
      << ", hash " << manifest.content_hash << ")\n";
  return kExitOk;
}

int cmd_train(const std::string& config_path, std::ostream& out) {
  const auto config = load_train_config(config_path);
  const auto run = train(config, [&](const EpochMetrics& m) { out << epoch_line(m) << std::endl; });
  out << "best epoch " << run.best_epoch << " (val mAP " << run.best_val_map << "), checkpoint "
      << run.best_checkpoint.string() << "\n";
  if (run.test_report) out << report_to_table(*run.test_report);
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& split, std::string dataset_path, std::string output_dir,
             int threads, std::ostream& out) {
  const auto model = load_checkpoint(checkpoint);
  if (dataset_path.empty()) {
    if (!model.metadata.contains("dataset")) {
      throw ConfigError("checkpoint records no dataset; pass --dataset");
    }
    dataset_path = model.metadata["dataset"].get<std::string>();
  }
  const auto dataset = load_dataset(dataset_path);
  const auto& ids = dataset.split(split);
  if (ids.empty()) throw DataError("split '" + split + "' is empty");
  const auto report = evaluate_model(model, dataset, ids, checkpoint_postprocess(model), resolve_threads(threads));
  if (output_dir.empty()) output_dir = fs::path(checkpoint).parent_path().string();
  const auto stem = fs::path(output_dir) / ("eval_" + split);
  write_text(stem.string() + ".json", report_to_json(report) + "\n");
  const auto table = report_to_table(report);
  write_text(stem.string() + ".txt", table);
  out << table;
  return kExitOk;
}

int cmd_ablation(const std::string& config_path, std::ostream& out) {
  const auto config = load_train_config(config_path);
  const auto result = run_ablation(config, [&](const std::string& column, const EpochMetrics& m) {
    out << column << "  " << epoch_line(m) << std::endl;
  });
  out << result.table;
  char buf[120];
  std::snprintf(buf, sizeof buf, "Ours - RetinaNet mAP: %+.4f\n", result.reports[2].map - result.reports[0].map);
  out << buf;
  return kExitOk;
}

int cmd_detect(const std::string& checkpoint, const std::vector<std::string>& images, double score_thresh,
               const std::string& output, const std::string& overlay_dir, int threads, std::ostream& out) {
  const auto model = load_checkpoint(checkpoint);
  auto post = checkpoint_postprocess(model);
  post.score_thresh = score_thresh;
  std::vector<CTSlice> slices;
  std::vector<BasicTensor<float>> inputs;
  for (const auto& path : images) {
    slices.push_back(load_slice(path));
    inputs.push_back(hu_normalize<float>(slices.back()));
  }
  const auto found = detect(model, inputs, post, resolve_threads(threads));
  std::vector<ImageDetections> rows;
  for (std::size_t i = 0; i < slices.size(); ++i) rows.push_back({slices[i].image_id, found[i]});
  if (output.empty()) {
    write_detections_csv(out, rows);
  } else {
    std::ostringstream csv;
    write_detections_csv(csv, rows);
    write_text(output, csv.str());
  }
  if (!overlay_dir.empty()) {
    fs::create_directories(overlay_dir);
    for (std::size_t i = 0; i < slices.size(); ++i) {
      save_png_rgb8(fs::path(overlay_dir) / (slices[i].image_id + ".png"), slices[i].height, slices[i].width,
                    render_overlay(slices[i], found[i]));
    }
  }
  return kExitOk;
}

int cmd_gradcheck(const GradientSuiteOptions& options, const std::string& mutate, const std::string& report_path,
                  std::ostream& out) {
  if (!mutate.empty()) set_gradient_mutation(mutate);
  const auto results = run_gradient_suite(options);
  set_gradient_mutation("");
  const auto report = format_gradient_report(results);
  out << report;
  if (!report_path.empty()) write_text(report_path, report);
  for (const auto& r : results)
    if (!r.passed()) return kExitCheckFailed;
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Lesion detector with path aggregation and DSE attention on synthetic CT phantoms", "pdse"};
  app.require_subcommand(1);

  std::string spec_path;
  auto* gen = app.add_subcommand("generate-phantoms", "Render a synthetic phantom dataset");
  gen->add_option("--spec", spec_path, "Phantom spec JSON")->required();

  std::string config_path;
  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", config_path, "Training config JSON")->required();

  std::string checkpoint, split, dataset_path, output_dir;
  int threads = 1;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--split", split, "train, val, test or all")->required();
  ev->add_option("--dataset", dataset_path, "Manifest path (default: the one recorded in the checkpoint)");
  ev->add_option("--output-dir", output_dir, "Where eval_<split>.json/.txt go (default: checkpoint directory)");
  ev->add_option("--threads", threads, "Worker threads (capped by PDSE_THREADS)");

  auto* ab = app.add_subcommand("ablation", "Train and compare the three model variants");
  ab->add_option("--config", config_path, "Base training config JSON")->required();

  std::vector<std::string> images;
  double score_thresh = 0.05;
  std::string output, overlay_dir;
  auto* de = app.add_subcommand("detect", "Detect lesions in images");
  de->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  de->add_option("images", images, "16-bit PNG or raw slices")->required();
  de->add_option("--score-thresh", score_thresh, "Minimum score");
  de->add_option("--output", output, "CSV path (default: stdout)");
  de->add_option("--overlay-dir", overlay_dir, "Write 8-bit overlays here");
  de->add_option("--threads", threads, "Worker threads (capped by PDSE_THREADS)");

  GradientSuiteOptions grad_options;
  std::string mutate, report_path;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference audit of every differentiable operation");
  gc->add_option("--instances", grad_options.instances, "Random instances per check");
  gc->add_option("--seed", grad_options.seed, "Seed");
  gc->add_option("--only", grad_options.only, "Restrict to these checks");
  gc->add_option("--report", report_path, "Also write the report here");
  gc->add_option("--mutate", mutate, "Negate the gradient of this op (self-test)")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (*gen) return cmd_generate(spec_path, out);
    if (*tr) return cmd_train(config_path, out);
    if (*ev) return cmd_eval(checkpoint, split, dataset_path, output_dir, threads, out);
    if (*ab) return cmd_ablation(config_path, out);
    if (*de) return cmd_detect(checkpoint, images, score_thresh, output, overlay_dir, threads, out);
    if (*gc) return cmd_gradcheck(grad_options, mutate, report_path, out);
  } catch (const TrainingError& e) {
    err << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  }
  return kExitInvalid;
}

}  // namespace pdse
