#pragma once

// Calibration notions expressed as distribution matching: each task says which
// label-side variable is compared between truth and forecast, and which
// conditioning variable z both sides share.

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "calikit/array.hpp"
#include "calikit/autodiff.hpp"
#include "calikit/forecast.hpp"
#include "calikit/kernels.hpp"
#include "calikit/rng.hpp"

namespace calikit {

enum class Family { regression, classification };

enum class TaskName {
  quantile,
  threshold,
  marginal,
  decision,
  group,
  distribution,
  individual,
  local,
  canonical,
  toplabel,
  marginal_cls,
};

enum class LabelTransform { identity, pit };

std::string to_string(Family f);
Family family_from_string(const std::string& s);
std::string to_string(TaskName t);
TaskName task_from_string(const std::string& s);

struct CalibrationTask {
  TaskName name = TaskName::quantile;
  // threshold: z = 1{Q(y0) <= alpha}. NaN y0 means "training-label median".
  double y0 = std::numeric_limits<double>::quiet_NaN();
  double alpha = 0.5;
  // decision: threshold loss at c. NaN means "training-label median".
  double c = std::numeric_limits<double>::quiet_NaN();
  std::string group_column;
  // local: feature indices forming phi(x).
  std::vector<std::size_t> features;
  std::optional<KernelSpec> kernel;

  Family family() const;
  LabelTransform transform() const;
  // Width of the conditioning variable for inputs with `input_dim` features and
  // `classes` classes.
  std::size_t z_dim(std::size_t input_dim, std::size_t classes) const;

  nlohmann::json to_json() const;
  static CalibrationTask from_json(const nlohmann::json& j);
};

// Inputs of one batch. Labels are real-valued for regression and class
// indices for classification.
struct BatchView {
  const Array& x;
  std::span<const double> y;
  std::span<const int> groups;
};

// Target rows (t_i, z_i) and forecast rows (t_hat_i^(s), z_i), the latter laid
// out example-major: row i*S + s.
struct RegressionPairs {
  Var target;
  Var forecast;
  std::size_t n = 0;
  std::size_t samples = 0;
  std::size_t z_dim = 0;
  // Uniform draws u behind the reparameterised samples (eps = Phi^-1(u)).
  Array uniforms;
};

RegressionPairs build_regression_pairs(Tape& tape, const CalibrationTask& task,
                                       const GaussianForecaster::Outputs& forecast,
                                       const BatchView& batch, std::size_t samples, Rng& rng);

// One distribution-matching constraint for classification. The forecast side
// is the pmf over `outcomes` label values, marginalised analytically.
struct ClassificationChannel {
  std::vector<std::size_t> target;
  Var pmf;
  std::optional<Var> z;
  std::size_t outcomes = 0;
};

// canonical and toplabel give one channel; marginal_cls gives one per class.
std::vector<ClassificationChannel> build_classification_pairs(Tape& tape,
                                                              const CalibrationTask& task,
                                                              Var logits, const BatchView& batch);

// Kernel over (transformed label, z) with rbf bandwidths left to the median
// heuristic.
KernelSpec default_kernel(const CalibrationTask& task, std::size_t z_dim);

// Top label with ties broken toward the lowest class index.
std::size_t argmax_lowest(std::span<const double> row);

}  // namespace calikit
