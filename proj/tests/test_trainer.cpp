#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "pdse/cli.hpp"
#include "pdse/trainer.hpp"

using namespace pdse;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pdse_trainer_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.backbone_blocks = {1, 1, 1, 1};
  m.backbone_widths = {8, 8, 16, 16};
  m.stem_width = 8;
  m.pyramid_width = 16;
  m.head_depth = 1;
  m.head_width = 16;
  m.se_reduction = 4;
  return m;
}

fs::path make_phantoms(const fs::path& dir, std::int64_t count, std::uint64_t seed = 3) {
  PhantomSpec spec;
  spec.count = count;
  spec.seed = seed;
  spec.output_dir = (dir / "data").string();
  generate_phantoms(spec);
  return dir / "data" / "manifest.json";
}

TrainConfig tiny_run(const fs::path& manifest, const fs::path& out) {
  TrainConfig c;
  c.model = tiny_model();
  c.dataset = manifest.string();
  c.output_dir = out.string();
  c.epochs = 1;
  c.batch_size = 2;
  c.warmup_iterations = 2;
  return c;
}

std::map<std::string, std::vector<float>> parameter_values(const ParameterStore<float>& store) {
  std::map<std::string, std::vector<float>> out;
  for (const auto& p : store.parameters()) out[p.name] = std::vector<float>(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

int cli(std::vector<std::string> args, std::string* out_text = nullptr) {
  args.insert(args.begin(), "pdse");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str() + err.str();
  return code;
}

// Shared fixture data: one small phantom set reused across tests.
class Trainer : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(scratch_dir("suite"));
    four_ = new fs::path(make_phantoms(*dir_ / "four", 4));
    twelve_ = new fs::path(make_phantoms(*dir_ / "twelve", 12));
  }
  static void TearDownTestSuite() {
    fs::remove_all(*dir_);
    delete dir_;
    delete four_;
    delete twelve_;
  }
  static fs::path* dir_;
  static fs::path* four_;
  static fs::path* twelve_;
};
fs::path* Trainer::dir_ = nullptr;
fs::path* Trainer::four_ = nullptr;
fs::path* Trainer::twelve_ = nullptr;

}  // namespace

TEST(TrainConfigJson, RoundTripsEveryField) {
  TrainConfig c;
  c.model = tiny_model();
  c.model.use_dse = false;
  c.dataset = "x/manifest.json";
  c.epochs = 7;
  c.lr_decay_epochs = {4, 6};
  c.postprocess.score_thresh = 0.2;
  const auto j = train_config_to_json(c);
  const auto back = train_config_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(train_config_to_json(back).dump(), j.dump());
}

TEST(TrainConfigJson, RejectsUnknownKeysAndInvalidValues) {
  EXPECT_THROW(train_config_from_json(nlohmann::json::parse(R"({"dataset":"m","epoch":3})")), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json::parse(R"({"dataset":"m","model":{"use_dse":1,"x":2}})")),
               ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json::parse(R"({"dataset":"m","epochs":0})")), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json::parse(R"({"dataset":"m","batch_size":0})")), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json::parse(R"({"epochs":2})")), ConfigError);
}

TEST(TrainConfigJson, RelativeDatasetResolvesAgainstConfigDirectory) {
  const auto dir = scratch_dir("relcfg");
  std::ofstream(dir / "c.json") << R"({"dataset": "sub/manifest.json"})";
  const auto c = load_train_config((dir / "c.json").string());
  EXPECT_EQ(fs::path(c.dataset), (dir / "sub/manifest.json").lexically_normal());
  fs::remove_all(dir);
}

TEST(Threads, EnvironmentCapsRequest) {
  ::setenv("PDSE_THREADS", "2", 1);
  EXPECT_EQ(resolve_threads(8), 2);
  EXPECT_EQ(resolve_threads(1), 1);
  ::unsetenv("PDSE_THREADS");
  EXPECT_EQ(resolve_threads(8), 8);
  EXPECT_EQ(resolve_threads(0), 1);
}

TEST(Schedule, WarmupThenStepDecay) {
  TrainConfig c;
  c.learning_rate = 0.1;
  c.warmup_iterations = 4;
  c.lr_decay_epochs = {3, 5};
  c.lr_decay_factor = 0.5;
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(c, 1, 0), 0.025);
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(c, 1, 3), 0.1);
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(c, 2, 100), 0.1);
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(c, 3, 100), 0.05);
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(c, 6, 100), 0.025);
}

TEST(Sgd, MatchesHandComputedMomentumUpdate) {
  ParameterStore<float> store(1);
  auto p = store.add("p", {2}, Init::zeros());
  p.mutable_data()[0] = 1.0f;
  p.mutable_data()[1] = -2.0f;
  SgdOptimizer opt(0.9, 0.1);
  for (int step = 0; step < 2; ++step) {
    auto loss = ops::sum(ops::mul(p, p));  // grad 2p
    loss.backward();
    opt.step(store, 0.5, 0.5);
    store.zero_grad();
  }
  // step 1: g = 0.5*2p + 0.1p = 1.1p, v = 1.1p, p' = p - 0.55p = 0.45p
  // step 2: g = 1.1*0.45p, v = 0.9*1.1p + 0.495p = 1.485p, p'' = 0.45p - 0.7425p
  EXPECT_NEAR(p.data()[0], 1.0 * (0.45 - 0.7425), 1e-6);
  EXPECT_NEAR(p.data()[1], -2.0 * (0.45 - 0.7425), 1e-6);
}

TEST(Sgd, NonFiniteGradientIsReportedByName) {
  ParameterStore<float> store(1);
  auto a = store.add("head.ok", {1}, Init::zeros());
  auto b = store.add("head.bad", {1}, Init::zeros());
  b.mutable_data()[0] = 1e-30f;
  const auto big = BasicTensor<float>({1}, {3e38f});
  // Forward values stay finite; the two accumulated gradients of b overflow.
  auto term = ops::sum(ops::mul(b, big));
  auto loss = ops::add(ops::sum(a), ops::add(term, term));
  loss.backward();
  try {
    gradient_norm(store);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("head.bad"), std::string::npos) << e.what();
  }
}

TEST(Ablation, SharedParameterGroupsInitializeIdentically) {
  std::vector<std::map<std::string, std::vector<float>>> variants;
  for (const auto [panet, dse] : {std::pair{false, false}, {true, false}, {true, true}}) {
    auto m = tiny_model();
    m.use_panet = panet;
    m.use_dse = dse;
    variants.push_back(parameter_values(init_model(m, 11).store));
  }
  std::size_t shared = 0;
  for (const auto& [name, values] : variants[0]) {
    for (std::size_t v = 1; v < variants.size(); ++v) {
      const auto it = variants[v].find(name);
      ASSERT_NE(it, variants[v].end()) << name;
      EXPECT_EQ(it->second, values) << name;
      ++shared;
    }
  }
  EXPECT_GT(shared, 0u);
  EXPECT_GT(variants[1].size(), variants[0].size());
  EXPECT_GT(variants[2].size(), variants[1].size());
}

TEST(Ablation, ComparisonTableHasThreeColumnsAndTenRows) {
  EvalReport r;
  r.map = 0.5;
  const auto table = comparison_table({"RetinaNet", "RetinaNet-PA", "Ours"}, {r, r, r});
  std::istringstream in(table);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  ASSERT_EQ(lines.size(), 11u);
  EXPECT_NE(lines[0].find("RetinaNet"), std::string::npos);
  EXPECT_NE(lines[0].find("RetinaNet-PA"), std::string::npos);
  EXPECT_NE(lines[0].find("Ours"), std::string::npos);
  EXPECT_EQ(lines[1].rfind("Bone", 0), 0u);
  EXPECT_EQ(lines[9].rfind("Other", 0), 0u);
  EXPECT_EQ(lines[10].rfind("mAP", 0), 0u);
}

TEST_F(Trainer, CheckpointSaveLoadSaveIsByteIdentical) {
  const auto dir = *dir_ / "ckpt";
  auto model = init_model(tiny_model(), 5);
  model.metadata = {{"epoch", 3}, {"note", "x"}};
  save_checkpoint(dir / "a.ckpt", model);
  const auto loaded = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(parameter_values(loaded.store), parameter_values(model.store));
  save_checkpoint(dir / "b.ckpt", loaded);
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_EQ(file_hash(dir / "a.ckpt"), file_hash(dir / "b.ckpt"));
  EXPECT_FALSE(fs::exists(dir / "a.ckpt.tmp"));
}

TEST_F(Trainer, CheckpointRejectsVersionMismatchAndCorruption) {
  const auto dir = *dir_ / "ckpt_bad";
  save_checkpoint(dir / "a.ckpt", init_model(tiny_model(), 5));
  auto bytes = slurp(dir / "a.ckpt");

  auto bumped = bytes;
  bumped[8] = static_cast<char>(kCheckpointVersion + 1);
  std::ofstream(dir / "v.ckpt", std::ios::binary) << bumped;
  try {
    load_checkpoint(dir / "v.ckpt");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  std::ofstream(dir / "t.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 7);
  EXPECT_THROW(load_checkpoint(dir / "t.ckpt"), CheckpointError);
  std::ofstream(dir / "x.ckpt", std::ios::binary) << bytes << "junk";
  EXPECT_THROW(load_checkpoint(dir / "x.ckpt"), CheckpointError);
  std::ofstream(dir / "m.ckpt", std::ios::binary) << "NOTACKPT";
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt"), CheckpointError);
}

TEST_F(Trainer, CheckpointRejectsArchitectureMismatch) {
  const auto dir = *dir_ / "ckpt_arch";
  auto model = init_model(tiny_model(), 5);
  // Header claims a different architecture than the stored tensors.
  auto other = tiny_model();
  other.use_dse = false;
  save_checkpoint(dir / "a.ckpt", other, model.store, nlohmann::ordered_json::object());
  EXPECT_THROW(load_checkpoint(dir / "a.ckpt"), CheckpointError);
}

TEST_F(Trainer, OneEpochOnFourImagesLogsOnceAndReloads) {
  const auto out = *dir_ / "one_epoch";
  const auto run = train(tiny_run(*four_, out));
  ASSERT_EQ(run.history.size(), 1u);
  std::ifstream log(run.metrics_log);
  std::vector<nlohmann::json> entries;
  for (std::string line; std::getline(log, line);) entries.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(entries.size(), 1u);
  EXPECT_EQ(entries[0]["epoch"], 1);
  EXPECT_TRUE(entries[0].contains("val_map"));
  EXPECT_TRUE(entries[0].contains("classification_loss"));
  EXPECT_TRUE(entries[0].contains("box_loss"));
  EXPECT_EQ(run.history[0].steps, 2);

  ASSERT_TRUE(fs::exists(run.best_checkpoint));
  ASSERT_TRUE(fs::exists(run.last_checkpoint));
  const auto loaded = load_checkpoint(run.last_checkpoint);
  save_checkpoint(out / "resaved.ckpt", loaded);
  EXPECT_EQ(slurp(run.last_checkpoint), slurp(out / "resaved.ckpt"));
  EXPECT_NE(parameter_values(loaded.store), parameter_values(init_model(tiny_model(), 1).store));
  EXPECT_EQ(loaded.metadata["epoch"], 1);
}

TEST_F(Trainer, MetricsLogRestartsWithEachRun) {
  const auto out = *dir_ / "rerun";
  train(tiny_run(*four_, out));
  train(tiny_run(*four_, out));
  std::ifstream log(out / "metrics.jsonl");
  int lines = 0;
  for (std::string line; std::getline(log, line);) ++lines;
  EXPECT_EQ(lines, 1);
}

TEST_F(Trainer, ZeroLearningRateLeavesParametersUnchanged) {
  auto cfg = tiny_run(*four_, *dir_ / "lr0");
  cfg.learning_rate = 0.0;
  const auto run = train(cfg);
  const auto trained = load_checkpoint(run.last_checkpoint);
  EXPECT_EQ(parameter_values(trained.store), parameter_values(init_model(cfg.model, cfg.seed).store));
}

TEST_F(Trainer, SeededRunsAreByteIdentical) {
  auto a = tiny_run(*twelve_, *dir_ / "rep_a");
  auto b = tiny_run(*twelve_, *dir_ / "rep_b");
  a.epochs = b.epochs = 2;
  const auto ra = train(a);
  const auto rb = train(b);
  EXPECT_EQ(file_hash(ra.last_checkpoint), file_hash(rb.last_checkpoint));
  EXPECT_EQ(file_hash(ra.best_checkpoint), file_hash(rb.best_checkpoint));
  EXPECT_EQ(slurp(ra.output_dir / "test_report.json"), slurp(rb.output_dir / "test_report.json"));
  EXPECT_EQ(slurp(ra.output_dir / "test_report.txt"), slurp(rb.output_dir / "test_report.txt"));
}

TEST_F(Trainer, DifferentSeedsDiverge) {
  auto a = tiny_run(*four_, *dir_ / "seed_a");
  auto b = tiny_run(*four_, *dir_ / "seed_b");
  b.seed = 2;
  EXPECT_NE(file_hash(train(a).last_checkpoint), file_hash(train(b).last_checkpoint));
}

TEST_F(Trainer, ThreadedEvaluationMatchesSingleThread) {
  const auto model = init_model(tiny_model(), 4);
  const auto dataset = load_dataset(*twelve_);
  PostprocessConfig post;
  post.score_thresh = 0.0;
  const auto one = evaluate_model(model, dataset, dataset.split("all"), post, 1);
  const auto three = evaluate_model(model, dataset, dataset.split("all"), post, 3);
  EXPECT_EQ(report_to_json(one), report_to_json(three));
}

TEST_F(Trainer, UntrainedModelScoresNearZeroAndDeterministically) {
  const auto model = init_model(ModelConfig{}, 1);
  const auto dataset = load_dataset(*twelve_);
  const auto first = evaluate_model(model, dataset, dataset.split("all"), {});
  const auto second = evaluate_model(model, dataset, dataset.split("all"), {});
  EXPECT_LT(first.map, 0.05);
  EXPECT_EQ(report_to_json(first), report_to_json(second));
}

TEST_F(Trainer, BlankImageYieldsNoDetectionsAtHalfThreshold) {
  const auto model = init_model(ModelConfig{}, 1);
  CTSlice blank;
  blank.height = blank.width = 128;
  blank.pixels.assign(128 * 128, 32768);
  PostprocessConfig post;
  post.score_thresh = 0.5;
  const auto found = detect(model, {hu_normalize<float>(blank)}, post);
  ASSERT_EQ(found.size(), 1u);
  EXPECT_TRUE(found[0].empty());
}

TEST_F(Trainer, NonFiniteTrainingAbortsNamingAParameter) {
  auto cfg = tiny_run(*four_, *dir_ / "nan");
  cfg.learning_rate = 1e30;
  cfg.warmup_iterations = 0;
  cfg.grad_clip_norm = 0.0;
  cfg.epochs = 3;
  try {
    train(cfg);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("non-finite"), std::string::npos) << what;
    EXPECT_NE(what.find("parameter '"), std::string::npos) << what;
  }
}

TEST_F(Trainer, AblationWritesThreeDistinctRuns) {
  auto cfg = tiny_run(*twelve_, *dir_ / "ablation");
  const auto result = run_ablation(cfg);
  ASSERT_EQ(result.columns, (std::vector<std::string>{"RetinaNet", "RetinaNet-PA", "Ours"}));
  ASSERT_EQ(result.reports.size(), 3u);
  const auto summary = nlohmann::json::parse(slurp(*dir_ / "ablation" / "ablation.json"));
  ASSERT_EQ(summary["variants"].size(), 3u);
  std::set<std::string> hashes;
  for (const auto& v : summary["variants"]) hashes.insert(v["checkpoint_hash"].get<std::string>());
  EXPECT_EQ(hashes.size(), 3u);
  EXPECT_TRUE(summary.contains("full_minus_baseline_map"));
  EXPECT_EQ(slurp(*dir_ / "ablation" / "ablation.txt"), result.table);
  for (const auto& c : result.columns) EXPECT_TRUE(fs::exists(*dir_ / "ablation" / c / "best.ckpt")) << c;
}

TEST_F(Trainer, CliDetectWritesRoundTrippingCsvAndOverlays) {
  const auto dir = *dir_ / "cli_detect";
  fs::create_directories(dir);
  save_checkpoint(dir / "m.ckpt", init_model(tiny_model(), 2));
  const auto dataset = load_dataset(*four_);
  std::vector<std::string> args{"detect", "--checkpoint", (dir / "m.ckpt").string()};
  for (const auto& id : dataset.split("all")) args.push_back((dataset.root / "images" / (id + ".raw")).string());
  args.insert(args.end(), {"--score-thresh", "0", "--output", (dir / "det.csv").string(), "--overlay-dir",
                           (dir / "overlays").string()});
  std::string text;
  ASSERT_EQ(cli(args, &text), kExitOk) << text;

  std::ifstream in(dir / "det.csv");
  const auto rows = read_detections_csv(in);
  ASSERT_FALSE(rows.empty());
  std::ostringstream again;
  write_detections_csv(again, rows);
  EXPECT_EQ(again.str(), slurp(dir / "det.csv"));

  for (const auto& id : dataset.split("all")) {
    const auto info = read_png_info(dir / "overlays" / (id + ".png"));
    EXPECT_EQ(info.height, dataset.manifest.height);
    EXPECT_EQ(info.width, dataset.manifest.width);
    EXPECT_EQ(info.bit_depth, 8);
  }
}

TEST_F(Trainer, CliDetectOnBlankImageWritesHeaderOnly) {
  const auto dir = *dir_ / "cli_blank";
  fs::create_directories(dir);
  save_checkpoint(dir / "m.ckpt", init_model(ModelConfig{}, 1));
  CTSlice blank;
  blank.height = blank.width = 128;
  blank.pixels.assign(128 * 128, 32768);
  save_slice_png16(dir / "blank.png", blank);
  std::string text;
  ASSERT_EQ(cli({"detect", "--checkpoint", (dir / "m.ckpt").string(), (dir / "blank.png").string(), "--score-thresh",
                 "0.5"},
                &text),
            kExitOk);
  EXPECT_EQ(text, "image_id,class_id,score,x1,y1,x2,y2\n");
}

TEST_F(Trainer, CliEvalWritesReportsAndUsesRecordedDataset) {
  const auto out = *dir_ / "cli_eval";
  auto cfg = tiny_run(*twelve_, out);
  cfg.evaluate_test = false;
  const auto run = train(cfg);
  std::string first, second;
  ASSERT_EQ(cli({"eval", "--checkpoint", run.best_checkpoint.string(), "--split", "test"}, &first), kExitOk) << first;
  const auto json_a = slurp(out / "eval_test.json");
  ASSERT_EQ(cli({"eval", "--checkpoint", run.best_checkpoint.string(), "--split", "test"}, &second), kExitOk);
  EXPECT_EQ(first, second);
  EXPECT_EQ(json_a, slurp(out / "eval_test.json"));
  EXPECT_EQ(slurp(out / "eval_test.txt"), first);
  EXPECT_EQ(cli({"eval", "--checkpoint", run.best_checkpoint.string(), "--split", "holdout"}), kExitInvalid);
}

TEST_F(Trainer, CliExitCodes) {
  const auto dir = *dir_ / "cli_codes";
  fs::create_directories(dir);
  EXPECT_EQ(cli({}), kExitInvalid);
  EXPECT_EQ(cli({"frobnicate"}), kExitInvalid);
  EXPECT_EQ(cli({"--help"}), kExitOk);
  std::ofstream(dir / "bad.json") << R"({"dataset": "m.json", "epochs": -1})";
  EXPECT_EQ(cli({"train", "--config", (dir / "bad.json").string()}), kExitInvalid);
  std::ofstream(dir / "broken.json") << "{";
  EXPECT_EQ(cli({"train", "--config", (dir / "broken.json").string()}), kExitInvalid);
  EXPECT_EQ(cli({"eval", "--checkpoint", (dir / "missing.ckpt").string(), "--split", "test"}), kExitInvalid);
  EXPECT_EQ(cli({"detect", "--checkpoint", (dir / "missing.ckpt").string(), "x.png"}), kExitInvalid);

  std::string report;
  EXPECT_EQ(cli({"gradcheck", "--instances", "3", "--only", "relu", "sigmoid"}, &report), kExitOk) << report;
  EXPECT_NE(report.find("max_rel_err"), std::string::npos);
  EXPECT_EQ(cli({"gradcheck", "--instances", "3", "--only", "relu", "--mutate", "relu"}), kExitCheckFailed);
}

TEST_F(Trainer, CliGeneratePhantomsResolvesOutputAgainstSpec) {
  const auto dir = *dir_ / "cli_gen";
  fs::create_directories(dir);
  std::ofstream(dir / "spec.json") << R"({"count": 3, "seed": 9, "output_dir": "out"})";
  std::string text;
  ASSERT_EQ(cli({"generate-phantoms", "--spec", (dir / "spec.json").string()}, &text), kExitOk) << text;
  EXPECT_TRUE(fs::exists(dir / "out" / "manifest.json"));
  std::ofstream(dir / "bad.json") << R"({"count": 3, "colour": "red"})";
  EXPECT_EQ(cli({"generate-phantoms", "--spec", (dir / "bad.json").string()}), kExitInvalid);
}
