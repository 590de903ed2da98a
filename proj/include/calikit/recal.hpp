#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <json.hpp>

#include "calikit/array.hpp"

namespace calikit {

// Monotone map R: [0, 1] -> [0, 1] stored as piecewise-linear breakpoints with
// R(0) = 0, R(1) = 1 and strictly increasing abscissae.
class QuantileRecalibrator {
 public:
  QuantileRecalibrator();  // identity
  QuantileRecalibrator(std::vector<double> xs, std::vector<double> ys);

  double operator()(double p) const;
  // Generalised inverse: the smallest p with R(p) >= c, so flat segments map
  // to their left endpoint.
  double inverse(double c) const;
  // Local slope of R at p, floored at 1e-6.
  double slope(double p) const;

  const std::vector<double>& xs() const { return xs_; }
  const std::vector<double>& ys() const { return ys_; }

  nlohmann::json to_json() const;
  static QuantileRecalibrator from_json(const nlohmann::json& j);

 private:
  std::size_t segment(double p) const;

  std::vector<double> xs_;
  std::vector<double> ys_;
};

// Pool-adjacent-violators fit of (sorted PIT, i / (n + 1)), interpolated
// linearly between pooled blocks. Requires at least 10 points.
QuantileRecalibrator fit_isotonic(std::span<const double> pits);

// R(Q(y)) for a Gaussian forecast.
double recalibrate_cdf(const QuantileRecalibrator& r, double mu, double sigma, double y);
// Q^-1(R^-1(c)) for c in (0, 1).
double recalibrate_icdf(const QuantileRecalibrator& r, double mu, double sigma, double c);
// -log(q(y) R'(Q(y))).
double recalibrated_nll(const QuantileRecalibrator& r, double mu, double sigma, double y);

struct TemperatureScaler {
  double temperature = 1.0;
};

// Mean cross-entropy of softmax(logits / t).
double mean_xent_at_temperature(const Array& logits, std::span<const std::size_t> ys, double t);

// Golden-section search on log T over [0.05, 20] to |dT| < 1e-4. Returns T = 1
// when it fits at least as well. All-constant logits yield T = 1 and set
// *degenerate.
TemperatureScaler fit_temperature(const Array& logits, std::span<const std::size_t> ys,
                                  bool* degenerate = nullptr);

}  // namespace calikit
