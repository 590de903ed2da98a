#include "calikit/recal.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "calikit/forecast.hpp"
#include "calikit/normal.hpp"

namespace calikit {

QuantileRecalibrator::QuantileRecalibrator() : xs_{0.0, 1.0}, ys_{0.0, 1.0} {}

QuantileRecalibrator::QuantileRecalibrator(std::vector<double> xs, std::vector<double> ys)
    : xs_(std::move(xs)), ys_(std::move(ys)) {
  if (xs_.size() != ys_.size() || xs_.size() < 2) {
    throw std::invalid_argument("recalibrator: need matching breakpoint lists of length >= 2");
  }
  if (xs_.front() != 0.0 || ys_.front() != 0.0 || xs_.back() != 1.0 || ys_.back() != 1.0) {
    throw std::invalid_argument("recalibrator: map must run from (0,0) to (1,1)");
  }
  for (std::size_t k = 1; k < xs_.size(); ++k) {
    if (!(xs_[k] > xs_[k - 1])) throw std::invalid_argument("recalibrator: abscissae not increasing");
    if (ys_[k] < ys_[k - 1]) throw std::invalid_argument("recalibrator: map is not monotone");
  }
}

std::size_t QuantileRecalibrator::segment(double p) const {
  auto it = std::upper_bound(xs_.begin(), xs_.end(), p);
  std::size_t k = it == xs_.begin() ? 0 : static_cast<std::size_t>(it - xs_.begin()) - 1;
  return std::min(k, xs_.size() - 2);
}

double QuantileRecalibrator::operator()(double p) const {
  if (p <= 0.0) return 0.0;
  if (p >= 1.0) return 1.0;
  const std::size_t k = segment(p);
  const double t = (p - xs_[k]) / (xs_[k + 1] - xs_[k]);
  return ys_[k] + t * (ys_[k + 1] - ys_[k]);
}

double QuantileRecalibrator::inverse(double c) const {
  if (c <= 0.0) return 0.0;
  if (c > 1.0) return 1.0;
  for (std::size_t k = 0; k + 1 < xs_.size(); ++k) {
    if (ys_[k + 1] < c) continue;
    if (ys_[k] >= c) return xs_[k];
    const double t = (c - ys_[k]) / (ys_[k + 1] - ys_[k]);
    return xs_[k] + t * (xs_[k + 1] - xs_[k]);
  }
  return 1.0;
}

double QuantileRecalibrator::slope(double p) const {
  const std::size_t k = segment(std::clamp(p, 0.0, 1.0));
  return std::max((ys_[k + 1] - ys_[k]) / (xs_[k + 1] - xs_[k]), 1e-6);
}

nlohmann::json QuantileRecalibrator::to_json() const {
  return {{"method", "isotonic"}, {"x", xs_}, {"y", ys_}};
}

QuantileRecalibrator QuantileRecalibrator::from_json(const nlohmann::json& j) {
  return QuantileRecalibrator(j.at("x").get<std::vector<double>>(),
                              j.at("y").get<std::vector<double>>());
}

QuantileRecalibrator fit_isotonic(std::span<const double> pits) {
  const std::size_t n = pits.size();
  if (n < 10) {
    throw std::invalid_argument("fit_isotonic: " + std::to_string(n) +
                                " validation points; use a validation split with at least 10");
  }
  std::vector<double> p(pits.begin(), pits.end());
  std::sort(p.begin(), p.end());

  struct Block {
    double x_sum;
    double y_sum;
    double count;
    double y() const { return y_sum / count; }
  };
  std::vector<Block> blocks;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = static_cast<double>(i + 1) / static_cast<double>(n + 1);
    // Tied abscissae share one fitted value.
    if (!blocks.empty() && p[i] == p[i - 1]) {
      blocks.back().x_sum += p[i];
      blocks.back().y_sum += y;
      blocks.back().count += 1.0;
    } else {
      blocks.push_back({p[i], y, 1.0});
    }
    while (blocks.size() > 1 && blocks[blocks.size() - 2].y() >= blocks.back().y()) {
      Block top = blocks.back();
      blocks.pop_back();
      blocks.back().x_sum += top.x_sum;
      blocks.back().y_sum += top.y_sum;
      blocks.back().count += top.count;
    }
  }

  std::vector<double> xs{0.0}, ys{0.0};
  for (const Block& b : blocks) {
    const double x = b.x_sum / b.count;
    // Blocks at the ends of [0, 1] are pinned by the endpoints.
    if (x <= 0.0 || x >= 1.0 || x <= xs.back()) continue;
    xs.push_back(x);
    ys.push_back(std::clamp(b.y(), ys.back(), 1.0));
  }
  xs.push_back(1.0);
  ys.push_back(1.0);
  return QuantileRecalibrator(std::move(xs), std::move(ys));
}

double recalibrate_cdf(const QuantileRecalibrator& r, double mu, double sigma, double y) {
  return r(gaussian_cdf(mu, sigma, y));
}

double recalibrate_icdf(const QuantileRecalibrator& r, double mu, double sigma, double c) {
  if (!(c > 0.0 && c < 1.0)) {
    throw std::domain_error("recalibrate_icdf: level " + std::to_string(c) + " outside (0, 1)");
  }
  const double p = std::clamp(r.inverse(c), 1e-300, std::nextafter(1.0, 0.0));
  return gaussian_icdf(mu, sigma, p);
}

double recalibrated_nll(const QuantileRecalibrator& r, double mu, double sigma, double y) {
  return gaussian_nll(mu, sigma, y) - std::log(r.slope(gaussian_cdf(mu, sigma, y)));
}

double mean_xent_at_temperature(const Array& logits, std::span<const std::size_t> ys, double t) {
  const Array pmf = softmax_rows(logits, t);
  double s = 0.0;
  for (std::size_t i = 0; i < pmf.rows(); ++i) s += xent(pmf.row_span(i), ys[i]);
  return s / static_cast<double>(pmf.rows());
}

TemperatureScaler fit_temperature(const Array& logits, std::span<const std::size_t> ys,
                                  bool* degenerate) {
  if (logits.rows() < 10) {
    throw std::invalid_argument("fit_temperature: need at least 10 validation examples");
  }
  if (ys.size() != logits.rows()) throw std::invalid_argument("fit_temperature: label count mismatch");
  if (degenerate) *degenerate = false;
  bool all_flat = true;
  for (std::size_t i = 0; i < logits.rows() && all_flat; ++i) {
    auto row = logits.row_span(i);
    all_flat = std::all_of(row.begin(), row.end(), [&](double v) { return v == row[0]; });
  }
  if (all_flat) {
    if (degenerate) *degenerate = true;
    return {1.0};
  }

  auto loss = [&](double log_t) { return mean_xent_at_temperature(logits, ys, std::exp(log_t)); };
  const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = std::log(0.05), hi = std::log(20.0);
  double a = hi - invphi * (hi - lo), b = lo + invphi * (hi - lo);
  double fa = loss(a), fb = loss(b);
  while (std::exp(hi) - std::exp(lo) >= 1e-4) {
    if (fa <= fb) {
      hi = b;
      b = a;
      fb = fa;
      a = hi - invphi * (hi - lo);
      fa = loss(a);
    } else {
      lo = a;
      a = b;
      fa = fb;
      b = lo + invphi * (hi - lo);
      fb = loss(b);
    }
  }
  const double t = std::exp(0.5 * (lo + hi));
  if (mean_xent_at_temperature(logits, ys, 1.0) <= mean_xent_at_temperature(logits, ys, t)) {
    return {1.0};
  }
  return {t};
}

}  // namespace calikit
