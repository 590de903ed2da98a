#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "calikit/checkpoint.hpp"
#include "calikit/experiment.hpp"

using namespace calikit;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "calikit_test_experiment" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

json small_regression(const std::string& synthetic = "heteroscedastic") {
  return {
      {"dataset", {{"kind", "synthetic"}, {"synthetic", {{"name", synthetic}, {"n", 300}}}}},
      {"family", "regression"},
      {"calibration_task", {{"name", "quantile"}}},
      {"model", {{"hidden", {8, 8}}}},
      {"objective", {{"lambda", 2.0}, {"batch_size", 32}, {"samples_per_forecast", 3}}},
      {"optimizer", {{"lr", 0.01}, {"max_epochs", 4}, {"patience", 10}}},
      {"seed", 7},
  };
}

json small_classification() {
  return {
      {"dataset",
       {{"kind", "synthetic"}, {"synthetic", {{"name", "classification"}, {"n", 300}, {"m", 3}}}}},
      {"family", "classification"},
      {"calibration_task", {{"name", "toplabel"}}},
      {"model", {{"hidden", {8}}}},
      {"objective", {{"lambda", 1.0}, {"batch_size", 32}}},
      {"optimizer", {{"lr", 0.01}, {"max_epochs", 3}}},
      {"seed", 3},
  };
}

}  // namespace

TEST(Config, EveryProblemIsReportedWithItsKey) {
  json j = small_regression();
  j["objective"]["lambda"] = -1.0;
  j["objective"]["batch_size"] = 1;
  j["optimizer"]["lr"] = 0.0;
  j["bogus"] = 1;
  j["model"]["hidden"] = {8, 0};
  try {
    ExperimentConfig::from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    const auto& p = e.problems();
    ASSERT_EQ(p.size(), 5u) << e.what();
    for (const char* key : {"objective.lambda", "objective.batch_size", "optimizer.lr", "bogus",
                            "model.hidden"}) {
      EXPECT_TRUE(std::any_of(p.begin(), p.end(),
                              [&](const std::string& s) { return s.find(key) != std::string::npos; }))
          << key;
    }
  }
}

TEST(Config, FamilyAndTaskMustAgree) {
  json j = small_regression();
  j["calibration_task"] = {{"name", "canonical"}};
  EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
  j = small_regression();
  j["dataset"] = {{"kind", "csv"}};
  try {
    ExperimentConfig::from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("dataset.path"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("dataset.target"), std::string::npos);
  }
}

TEST(Config, Defaults) {
  const ExperimentConfig c = ExperimentConfig::from_json({{"dataset", {{"kind", "synthetic"}}}});
  EXPECT_EQ(c.hidden, (std::vector<std::size_t>{128, 128, 128}));
  EXPECT_EQ(c.batch_size, 64u);
  EXPECT_EQ(c.samples, 10u);
  EXPECT_EQ(c.patience, 50u);
  EXPECT_EQ(c.lambda, 0.0);
  EXPECT_EQ(c.task.name, TaskName::quantile);
  const ExperimentConfig k = ExperimentConfig::from_json(small_classification());
  EXPECT_EQ(k.task.name, TaskName::toplabel);
}

TEST(Config, JsonRoundTrip) {
  json j = small_regression("geo");
  j["calibration_task"] = {{"name", "local"}, {"features", {"lat", "lon"}}};
  j["metrics"] = {{"lce_features", {"lat", "lon"}}, {"dce_c", 0.25}};
  const ExperimentConfig a = ExperimentConfig::from_json(j);
  EXPECT_EQ(a.task_feature_names, (std::vector<std::string>{"lat", "lon"}));
  const ExperimentConfig b = ExperimentConfig::from_json(a.to_json());
  EXPECT_EQ(a.to_json(), b.to_json());
}

TEST(EarlyStop, ConstantLossStopsAfterPatience) {
  EarlyStopping es(1);
  EXPECT_FALSE(es.update(1.0));
  EXPECT_TRUE(es.improved());
  EXPECT_TRUE(es.update(1.0));  // no strict improvement
  EXPECT_FALSE(es.improved());
  EXPECT_EQ(es.best(), 1.0);
  EXPECT_EQ(es.best_epoch(), 1u);
}

TEST(EarlyStop, ImprovementResetsCounter) {
  EarlyStopping es(2);
  const double losses[] = {3.0, 2.0, 2.5, 1.0, 1.0};
  for (double l : losses) EXPECT_FALSE(es.update(l));
  EXPECT_TRUE(es.update(1.5));
  EXPECT_EQ(es.best_epoch(), 4u);
}

TEST(Checkpoint, TextRoundTripIsExact) {
  Checkpoint c;
  c.manifest = {{"format", "test"}, {"x", 1.5}};
  c.names = {"W0", "b0"};
  c.params = {Array::of(2, 2, {0.1, -1e-300, 3.0e10, 1.0 / 3.0}), Array::of(1, 2, {-0.0, 7})};
  const std::string text = serialize_checkpoint(c);
  EXPECT_EQ(text.rfind(kCheckpointMagic, 0), 0u);
  const Checkpoint back = parse_checkpoint(text, "memory");
  EXPECT_EQ(back.names, c.names);
  EXPECT_EQ(back.params, c.params);
  EXPECT_EQ(back.manifest, c.manifest);
  EXPECT_THROW(parse_checkpoint("not a checkpoint\n", "memory"), std::runtime_error);
}

TEST(Pipeline, TrainIsBitwiseDeterministic) {
  const ExperimentConfig cfg = ExperimentConfig::from_json(small_regression());
  const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
  const TrainResult ra = train(cfg, a.string());
  train(cfg, b.string());
  EXPECT_EQ(read_file(a / "model.ckpt"), read_file(b / "model.ckpt"));
  cmd_eval(a.string(), "test");
  cmd_eval(b.string(), "test");
  EXPECT_EQ(read_file(a / "metrics_test.json"), read_file(b / "metrics_test.json"));

  // Log: header plus one line per epoch.
  std::ifstream log(a / "train_log.csv");
  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line, "epoch,train_loss,val_loss,wall_seconds");
  std::size_t lines = 0;
  while (std::getline(log, line)) ++lines;
  EXPECT_EQ(lines, ra.log.size());
  EXPECT_LE(ra.log.size(), 4u);

  const json manifest = json::parse(read_file(a / "manifest.json"));
  for (const char* key : {"config", "kernel", "standardization", "split", "rng", "feature_names"})
    EXPECT_TRUE(manifest.contains(key)) << key;
  EXPECT_EQ(manifest["split"]["train"], 210);
  EXPECT_TRUE(KernelSpec::from_json(manifest["kernel"]).resolved());
}

TEST(Pipeline, DifferentSeedsDiffer) {
  json j = small_regression();
  const fs::path a = fresh_dir("seed_a"), b = fresh_dir("seed_b");
  train(ExperimentConfig::from_json(j), a.string());
  j["seed"] = 8;
  train(ExperimentConfig::from_json(j), b.string());
  EXPECT_NE(read_file(a / "model.ckpt"), read_file(b / "model.ckpt"));
}

TEST(Pipeline, RegressionEvalAndIsotonicRecal) {
  const fs::path dir = fresh_dir("reg");
  train(ExperimentConfig::from_json(small_regression()), dir.string());
  const MetricReport before = cmd_eval(dir.string(), "val");
  const json j = before.to_json();
  for (const char* key : {"qce", "nll", "dce", "dce_squared", "kce"}) EXPECT_TRUE(j.contains(key)) << key;
  for (const char* key : {"ece", "accuracy", "entropy"}) EXPECT_FALSE(j.contains(key)) << key;
  EXPECT_EQ(j["meta"]["posthoc"], "none");
  EXPECT_EQ(j["meta"]["split"], "val");

  // Evaluating twice writes identical JSON.
  const std::string first = read_file(dir / "metrics_val.json");
  cmd_eval(dir.string(), "val");
  EXPECT_EQ(read_file(dir / "metrics_val.json"), first);

  const RecalSummary s = cmd_recal(dir.string(), "isotonic");
  EXPECT_LE(s.after, std::max(0.02, 2.0 / std::sqrt(30.0)));
  EXPECT_EQ(s.after, cmd_eval(dir.string(), "val").values.at("qce"));
  const MetricReport after = cmd_eval(dir.string(), "val");
  EXPECT_EQ(after.meta["posthoc"], "isotonic");

  // A second recal replaces the first rather than stacking.
  const RecalSummary again = cmd_recal(dir.string(), "isotonic");
  EXPECT_EQ(again.before, s.before);
  EXPECT_THROW(cmd_recal(dir.string(), "temperature"), ConfigError);
  EXPECT_THROW(cmd_eval(dir.string(), "holdout"), std::invalid_argument);
}

TEST(Pipeline, ClassificationEvalAndTemperature) {
  const fs::path dir = fresh_dir("cls");
  train(ExperimentConfig::from_json(small_classification()), dir.string());
  const json j = cmd_eval(dir.string(), "test").to_json();
  for (const char* key : {"accuracy", "nll", "ece", "entropy", "kce"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_FALSE(j.contains("qce"));
  const RecalSummary s = cmd_recal(dir.string(), "temperature");
  EXPECT_LE(s.after, s.before);
  const MetricReport after = cmd_eval(dir.string(), "test");
  EXPECT_EQ(after.values.at("accuracy"), j["accuracy"].get<double>());
  EXPECT_EQ(after.meta["temperature"], s.temperature);
  EXPECT_THROW(cmd_recal(dir.string(), "isotonic"), ConfigError);
}

TEST(Pipeline, LceMapGrid) {
  const fs::path dir = fresh_dir("lce");
  train(ExperimentConfig::from_json(small_regression("geo")), dir.string());
  const fs::path out = dir / "map.csv";
  const auto cells = cmd_lce_map(dir.string(), "lat", "lon", 2, out.string());
  EXPECT_EQ(cells.size(), 4u);
  std::ifstream in(out);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "f1,f2,lce_total,neighborhood_weight_sum");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 4u);
  EXPECT_THROW(cmd_lce_map(dir.string(), "lat", "nope", 2, out.string()), std::invalid_argument);
}

TEST(Pipeline, LceGridLayout) {
  const std::vector<double> pit{0.1, 0.4, 0.6, 0.9};
  const Array phi = Array::of(4, 2, {0, 0, 0, 1, 1, 0, 1, 1});
  const double scale[] = {1.0, 1.0};
  const auto cells = lce_grid(pit, phi, scale, 3, 0.5, 10);
  ASSERT_EQ(cells.size(), 9u);
  EXPECT_EQ(cells[1].f1, 0.0);
  EXPECT_EQ(cells[1].f2, 0.5);
  EXPECT_EQ(cells[3].f1, 0.5);
  for (const auto& c : cells) EXPECT_TRUE(c.lce_total.has_value());
  const auto far = lce_grid(pit, phi, scale, 1, 1e-3, 10);
  EXPECT_FALSE(far[0].lce_total.has_value());  // centre has no neighbours at this bandwidth
}

TEST(Pipeline, SplitMismatchIsDetected) {
  const fs::path dir = fresh_dir("mismatch");
  const ExperimentConfig cfg = ExperimentConfig::from_json(small_regression());
  train(cfg, dir.string());
  const LoadedRun run = load_run(dir.string());
  ExperimentConfig other = cfg;
  other.dataset.n = 400;
  const PreparedData data = prepare_data(other);
  try {
    evaluate(run, data, "test");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("split mismatch"), std::string::npos);
  }
}

TEST(Pipeline, MissingRunIsAConfigError) {
  EXPECT_THROW(load_run((fresh_dir("empty") / "nothing").string()), ConfigError);
}

TEST(Pipeline, RepeatsAggregate) {
  json j = small_regression();
  j["optimizer"]["max_epochs"] = 2;
  const fs::path dir = fresh_dir("repeats");
  const json agg = cmd_train_repeats(ExperimentConfig::from_json(j), dir.string(), 2);
  EXPECT_TRUE(fs::exists(dir / "seed_7" / "model.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "seed_8" / "model.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "aggregate.json"));
  const json& q = agg.at("metrics").at("qce");
  EXPECT_EQ(q.at("n"), 2);
  const double a = json::parse(read_file(dir / "seed_7" / "metrics_test.json"))["qce"];
  const double b = json::parse(read_file(dir / "seed_8" / "metrics_test.json"))["qce"];
  EXPECT_NEAR(q.at("mean").get<double>(), 0.5 * (a + b), 1e-15);
  EXPECT_NEAR(q.at("stderr").get<double>(), std::abs(a - b) / 2.0, 1e-12);
}
