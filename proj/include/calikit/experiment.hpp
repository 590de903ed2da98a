#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "calikit/caltasks.hpp"
#include "calikit/data.hpp"
#include "calikit/forecast.hpp"
#include "calikit/kernels.hpp"
#include "calikit/metrics.hpp"
#include "calikit/recal.hpp"

namespace calikit {

// Invalid configuration. The message lists every problem, one per line, each
// prefixed with the offending key.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::vector<std::string>& problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct DatasetConfig {
  std::string kind = "synthetic";  // "csv" | "synthetic"
  std::string path;
  std::string target;
  std::string group_column;
  std::string synthetic_name = "heteroscedastic";
  std::size_t n = 2000;
  std::size_t classes = 3;
  std::optional<std::uint64_t> synthetic_seed;  // defaults to the run seed
};

struct MetricsConfig {
  std::size_t qce_levels = 20;
  std::size_t ece_bins = 10;
  std::size_t kce_samples = 4;
  std::size_t lce_levels = 20;
  double lce_bandwidth = 0.2;  // rbf bandwidth over standardised features
  std::vector<std::string> lce_features;
  double dce_c = std::numeric_limits<double>::quiet_NaN();  // NaN: training median
};

struct ExperimentConfig {
  DatasetConfig dataset;
  Family family = Family::regression;
  CalibrationTask task;
  std::vector<std::string> task_feature_names;  // local task given by name
  std::optional<nlohmann::json> kernel;         // overrides the task default
  std::vector<std::size_t> hidden{128, 128, 128};
  double sigma_min = 1e-3;  // standardised label units
  double lambda = 0.0;
  std::size_t batch_size = 64;
  std::size_t samples = 10;
  double lr = 1e-3;
  std::size_t max_epochs = 200;
  std::size_t patience = 50;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  MetricsConfig metrics;

  // Fully materialised form; from_json(to_json()) reproduces the config.
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

ExperimentConfig load_config(const std::string& path);

// Raw data plus the standardised train/val/test splits. Features are
// standardised with training statistics; regression labels likewise.
struct PreparedData {
  Dataset raw;
  SplitIndices split;
  Standardizer x_std;
  Standardizer y_std;  // identity for classification
  Dataset train;
  Dataset val;
  Dataset test;
  double train_label_median = 0.0;  // raw units

  const Dataset& part(const std::string& name) const;
};

PreparedData prepare_data(const ExperimentConfig& cfg);

// Early stopping on strict improvement of the validation loss.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
  // Returns true when training should stop after this epoch.
  bool update(double val_loss);
  bool improved() const { return improved_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t since_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
  bool improved_ = false;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  nlohmann::json manifest;
};

// Trains and writes model.ckpt, manifest.json and train_log.csv into run_dir.
TrainResult train(const ExperimentConfig& cfg, const std::string& run_dir);

// A trained forecaster restored from a run directory.
struct LoadedRun {
  nlohmann::json manifest;
  ExperimentConfig config;
  std::optional<GaussianForecaster> regressor;
  std::optional<CategoricalForecaster> classifier;
  std::optional<QuantileRecalibrator> isotonic;
  std::optional<TemperatureScaler> temperature;
};

LoadedRun load_run(const std::string& run_dir);

// Raw-unit Gaussian forecasts of a regression run on a prepared split.
GaussianForecasts predict_raw(const LoadedRun& run, const PreparedData& data,
                              const Dataset& part);

// Metrics on one split, with any post-hoc recalibrator applied.
MetricReport evaluate(const LoadedRun& run, const PreparedData& data, const std::string& split);
// Loads the run, evaluates, and writes the report as JSON to `out`
// (default run_dir/metrics_<split>.json).
MetricReport cmd_eval(const std::string& run_dir, const std::string& split,
                      const std::string& out = "");

struct RecalSummary {
  std::string method;
  double before = 0.0;  // validation QCE or XE
  double after = 0.0;
  double temperature = 1.0;
};

// Fits on the validation split and replaces any stored recalibrator.
RecalSummary cmd_recal(const std::string& run_dir, const std::string& method);

struct LceCell {
  double f1 = 0.0;
  double f2 = 0.0;
  std::optional<double> lce_total;  // empty when the neighbourhood is empty
  double weight_sum = 0.0;
};

// LCE_total on a grid x grid lattice spanning the ranges of the two phi
// columns (row-major: f1 outer, f2 inner). `phi_raw` holds raw feature
// values; they are scaled by `phi_scale` before the kernel sees them.
std::vector<LceCell> lce_grid(std::span<const double> pit, const Array& phi_raw,
                              std::span<const double> phi_scale, std::size_t grid,
                              double bandwidth, std::size_t levels);

std::vector<LceCell> cmd_lce_map(const std::string& run_dir, const std::string& f1,
                                 const std::string& f2, std::size_t grid, const std::string& out);

// Trains and evaluates seeds seed..seed+repeats-1 into run_dir/seed_<s> and
// writes mean and standard error of every test metric to run_dir/aggregate.json.
nlohmann::json cmd_train_repeats(const ExperimentConfig& cfg, const std::string& run_dir,
                                 std::size_t repeats);

}  // namespace calikit
