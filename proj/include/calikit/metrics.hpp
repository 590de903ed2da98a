#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "calikit/array.hpp"
#include "calikit/forecast.hpp"
#include "calikit/kernels.hpp"
#include "calikit/rng.hpp"

namespace calikit {

// Probability integral transform Q_i(y_i) for every example.
std::vector<double> pits(const GaussianForecasts& f, std::span<const double> ys);

// Mean absolute coverage gap over levels c_j = j / (levels + 1), j = 1..levels.
double qce_from_pits(std::span<const double> pit, std::size_t levels = 20);
double qce(const GaussianForecasts& f, std::span<const double> ys, std::size_t levels = 20);

// Equal-width top-label-confidence bins, frequency-weighted absolute gaps.
double ece(const Array& pmf, std::span<const std::size_t> ys, std::size_t bins = 10);

struct DceResult {
  double dce = 0.0;          // sqrt of the summed squared gaps
  double dce_squared = 0.0;
  double gap_plus = 0.0;     // action +1: mean 1{y <= c} - mean Q_i(c)
  double gap_minus = 0.0;    // action -1: mean 1{y >= c} - mean (1 - Q_i(c))
};

// Decision calibration error for actions {-1, +1} under the loss
// l(a, y) = 1{a != sign(y - c)}; forecast expectations are analytic.
DceResult dce(const GaussianForecasts& f, std::span<const double> ys, double c);
// Same, given each forecast's cdf at c.
DceResult dce_from_cdf(std::span<const double> cdf_at_c, std::span<const double> ys, double c);

class ZeroWeightError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct LceQuery {
  std::vector<double> per_level;  // LCE(x; c_i), c_i = i / B
  double total = 0.0;             // mean of squares
  double weight_sum = 0.0;
};

// Local calibration error at one query point phi(x). `phi_data` holds phi(x_i)
// row by row. Throws ZeroWeightError when every kernel weight vanishes.
LceQuery lce_at(std::span<const double> pit, const Array& phi_data,
                std::span<const double> query, const KernelSpec& kernel, std::size_t levels = 20);

struct LceResult {
  std::vector<double> total;  // one LCE_total per query row
  double mean_total = 0.0;
};

// Evaluates lce_at for every query row in parallel.
LceResult lce(const GaussianForecasts& f, std::span<const double> ys, const Array& phi_data,
              const Array& queries, const KernelSpec& kernel, std::size_t levels = 20);

LceResult lce_from_pits(std::span<const double> pit, const Array& phi_data, const Array& queries,
                        const KernelSpec& kernel, std::size_t levels = 20);

// MMD^2 with a product kernel over (label, x): rbf over labels for regression
// (samples drawn from the forecasts), delta over labels for classification.
// A pending rbf bandwidth is resolved by the median heuristic on the targets.
double kce_regression(const Array& x, std::span<const double> ys, const GaussianForecasts& f,
                      const KernelSpec& kernel, std::size_t samples, Rng& rng);
// Same, with forecast label samples given explicitly (n*S, example-major).
double kce_regression_samples(const Array& x, std::span<const double> ys,
                              std::span<const double> samples, std::size_t s,
                              const KernelSpec& kernel);
double kce_classification(const Array& x, std::span<const std::size_t> ys, const Array& pmf,
                          const KernelSpec& kernel);
KernelSpec default_kce_kernel(std::size_t feature_dim, bool classification);

// Fraction of rows whose argmax (lowest index on ties) equals the label.
double accuracy(const Array& pmf, std::span<const std::size_t> ys);
double nll_eval(const GaussianForecasts& f, std::span<const double> ys);
double nll_eval(const Array& pmf, std::span<const std::size_t> ys);
double mean_entropy(const Array& pmf);

struct MetricReport {
  std::map<std::string, double> values;
  nlohmann::json meta = nlohmann::json::object();

  void set(const std::string& key, double v);
  // Metric keys at top level plus "meta"; absent metrics are omitted.
  nlohmann::json to_json() const;
};

}  // namespace calikit
