// calikit: train, evaluate, recalibrate and map local calibration error.
//
//   calikit train  --config cfg.json [--run-dir DIR] [--seed S] [--repeats R]
//   calikit eval   --run-dir DIR [--split test] [--out metrics.json]
//   calikit recal  --run-dir DIR --method isotonic|temperature
//   calikit lce-map --run-dir DIR --features f1,f2 [--grid 20] --out grid.csv
//
// Exit codes: 0 success, 2 configuration error, 3 runtime or numerical error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "calikit/experiment.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

std::string summary_line(const calikit::MetricReport& r) {
  std::string out;
  for (const auto& [k, v] : r.values) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s=%.6g", k.c_str(), v);
    out += (out.empty() ? "" : " ") + std::string(buf);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibration-regularised probabilistic forecasting"};
  app.require_subcommand(1);

  std::string config_path, run_dir, split = "test", method, features, out;
  std::size_t grid = 20, repeats = 1;
  std::optional<std::uint64_t> seed;

  auto* train = app.add_subcommand("train", "Train a forecaster from a JSON config");
  train->add_option("--config", config_path, "Experiment config (JSON)")->required();
  train->add_option("--run-dir", run_dir, "Output directory (default: config output_dir)");
  train->add_option("--seed", seed, "Overrides the config seed");
  train->add_option("--repeats", repeats, "Train seeds seed..seed+R-1 and aggregate test metrics")
      ->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "Evaluate calibration metrics on a split");
  eval->add_option("--run-dir", run_dir, "Run directory")->required();
  eval->add_option("--split", split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--out", out, "Metrics JSON (default: RUN_DIR/metrics_SPLIT.json)");

  auto* recal = app.add_subcommand("recal", "Fit a post-hoc recalibrator on the validation split");
  recal->add_option("--run-dir", run_dir, "Run directory")->required();
  recal->add_option("--method", method, "isotonic (regression) or temperature (classification)")
      ->required();

  auto* lce = app.add_subcommand("lce-map", "Local calibration error over a feature-pair grid");
  lce->add_option("--run-dir", run_dir, "Run directory")->required();
  lce->add_option("--features", features, "Two feature names, comma separated")->required();
  lce->add_option("--grid", grid, "Grid points per axis")->check(CLI::PositiveNumber);
  lce->add_option("--out", out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kConfigError;
  }

  try {
    if (*train) {
      auto cfg = calikit::load_config(config_path);
      if (seed) cfg.seed = *seed;
      const std::string dir = run_dir.empty() ? cfg.output_dir : run_dir;
      if (repeats > 1) {
        auto agg = calikit::cmd_train_repeats(cfg, dir, repeats);
        std::cout << agg.dump(2) << "\n";
      } else {
        auto r = calikit::train(cfg, dir);
        std::cout << "trained " << r.log.size() << " epochs, best epoch " << r.best_epoch
                  << ", best val loss " << r.best_val_loss << " -> " << dir << "\n";
      }
    } else if (*eval) {
      auto r = calikit::cmd_eval(run_dir, split, out);
      std::cout << split << ": " << summary_line(r) << "\n";
    } else if (*recal) {
      auto s = calikit::cmd_recal(run_dir, method);
      if (s.method == "isotonic") {
        std::cout << "isotonic: val qce " << s.before << " -> " << s.after << "\n";
      } else {
        std::cout << "temperature " << s.temperature << ": val xent " << s.before << " -> "
                  << s.after << "\n";
      }
    } else if (*lce) {
      const auto comma = features.find(',');
      if (comma == std::string::npos) {
        throw calikit::ConfigError({"--features: expected two names separated by a comma"});
      }
      auto cells = calikit::cmd_lce_map(run_dir, features.substr(0, comma),
                                        features.substr(comma + 1), grid, out);
      std::size_t empty = 0;
      for (const auto& c : cells) empty += c.lce_total ? 0 : 1;
      std::cout << "wrote " << cells.size() << " cells (" << empty << " empty) to " << out << "\n";
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}
