#pragma once

// Unbiased squared-MMD estimators between observed labels and forecasts.
//
// Regression: each example i contributes a target row T_i = (t_i, z_i) and S
// forecast rows F_is = (t_hat_is, z_i). With k the joint kernel,
//
//   h_ij = k(T_i, T_j) + mean_{s,s'} k(F_is, F_js')
//          - mean_s k(T_i, F_js) - mean_s k(T_j, F_is)
//   MMD^2 = 1/(n(n-1)) sum_{i != j} h_ij
//
// Classification: the forecast label is marginalised analytically,
//
//   h_ij = k((y_i,z_i),(y_j,z_j)) + sum_{a,b} q_i(a) q_j(b) k((a,z_i),(b,z_j))
//          - 2 sum_a q_i(a) k((a,z_i),(y_j,z_j))
//
// Estimates may be negative and are never clamped.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "calikit/array.hpp"
#include "calikit/autodiff.hpp"
#include "calikit/caltasks.hpp"
#include "calikit/forecast.hpp"
#include "calikit/kernels.hpp"
#include "calikit/rng.hpp"

namespace calikit {

struct MmdEstimate {
  double value = 0.0;
  std::size_t n = 0;
  std::size_t samples = 0;
  KernelSpec kernel;
};

struct RegressionMmdGrad {
  Array d_target;
  Array d_forecast;
};

struct ClassificationMmdGrad {
  Array d_pmf;
  Array d_z;
};

// target: n x D, forecast: (n*S) x D example-major. Parallel over examples;
// every row's contribution is summed in index order afterwards, so results are
// identical for any thread count. Throws std::invalid_argument when n < 2.
MmdEstimate mmd_usq_regression(const KernelSpec& kernel, const Array& target,
                               const Array& forecast, std::size_t samples,
                               RegressionMmdGrad* grad = nullptr);

// labels: n outcome indices; pmf: n x K; z: n x dz or nullptr. The kernel sees
// rows (outcome index, z...).
MmdEstimate mmd_usq_classification(const KernelSpec& kernel, std::span<const std::size_t> labels,
                                   const Array& pmf, const Array* z,
                                   ClassificationMmdGrad* grad = nullptr);

// Differentiable tape wrappers around the estimators above.
Var mmd_regression(Tape& tape, const KernelSpec& kernel, Var target, Var forecast,
                   std::size_t samples);
Var mmd_classification(Tape& tape, const KernelSpec& kernel, std::span<const std::size_t> labels,
                       Var pmf, std::optional<Var> z);

// Finite distribution over kernel inputs: row r of `points` has mass weights[r].
struct DiscreteDistribution {
  Array points;
  std::vector<double> weights;
};

// E_PP k + E_QQ k - 2 E_PQ k by exhaustive double sums.
double population_mmd_oracle(const DiscreteDistribution& p, const DiscreteDistribution& q,
                             const KernelSpec& kernel);

struct Objective {
  double lambda = 0.0;
  std::size_t samples = 10;
};

struct TrainingLoss {
  Var total;
  Var proper;  // summed NLL or cross-entropy
  std::optional<Var> mmd;
};

// sum_i NLL_i + lambda * MMD^2 on one batch. The MMD term is skipped entirely
// when lambda == 0. `kernel` must be resolved.
TrainingLoss regression_training_loss(Tape& tape, const GaussianForecaster& model,
                                      std::span<const Var> bound, const BatchView& batch,
                                      const CalibrationTask& task, const KernelSpec& kernel,
                                      const Objective& objective, Rng& rng);

TrainingLoss classification_training_loss(Tape& tape, const CategoricalForecaster& model,
                                          std::span<const Var> bound, const BatchView& batch,
                                          const CalibrationTask& task, const KernelSpec& kernel,
                                          const Objective& objective);

}  // namespace calikit
