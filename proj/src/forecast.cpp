#include "calikit/forecast.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "calikit/normal.hpp"

namespace calikit {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

void require_sigma(double sigma) {
  if (!(sigma > 0.0)) {
    throw std::domain_error("gaussian: sigma must be positive, got " + std::to_string(sigma));
  }
}

}  // namespace

double gaussian_nll(double mu, double sigma, double y) {
  require_sigma(sigma);
  const double z = (y - mu) / sigma;
  return kHalfLog2Pi + std::log(sigma) + 0.5 * z * z;
}

double gaussian_pdf(double mu, double sigma, double y) {
  require_sigma(sigma);
  return normal_pdf((y - mu) / sigma) / sigma;
}

double gaussian_cdf(double mu, double sigma, double y) {
  require_sigma(sigma);
  return normal_cdf((y - mu) / sigma);
}

double gaussian_icdf(double mu, double sigma, double p) {
  require_sigma(sigma);
  return mu + sigma * normal_icdf(p);
}

double xent(std::span<const double> pmf, std::size_t y, std::size_t* clamp_count) {
  if (y >= pmf.size()) throw std::out_of_range("xent: label outside pmf support");
  double p = pmf[y];
  if (p < 1e-12) {
    p = 1e-12;
    if (clamp_count) ++*clamp_count;
  }
  return -std::log(p);
}

double entropy(std::span<const double> pmf) {
  double h = 0.0;
  for (double p : pmf)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

Array softmax_rows(const Array& logits, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax: temperature must be positive");
  Array out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row_span(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      out(r, c) = std::exp((in[c] - mx) / temperature);
      z += out(r, c);
    }
    for (std::size_t c = 0; c < in.size(); ++c) out(r, c) /= z;
  }
  return out;
}

Mlp::Mlp(MlpShape shape, Rng& rng) : shape_(std::move(shape)) {
  std::size_t fan_in = shape_.input_dim;
  std::vector<std::size_t> widths = shape_.hidden;
  widths.push_back(shape_.output_dim);
  for (std::size_t width : widths) {
    Array w(fan_in, width);
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : w.flat()) v = sd * rng.normal();
    params_.push_back(std::move(w));
    params_.emplace_back(1, width, 0.0);
    fan_in = width;
  }
}

Mlp::Mlp(MlpShape shape, std::vector<Array> params)
    : shape_(std::move(shape)), params_(std::move(params)) {
  std::size_t fan_in = shape_.input_dim;
  std::vector<std::size_t> widths = shape_.hidden;
  widths.push_back(shape_.output_dim);
  if (params_.size() != 2 * widths.size()) {
    throw std::invalid_argument("mlp: expected " + std::to_string(2 * widths.size()) +
                                " parameter arrays, got " + std::to_string(params_.size()));
  }
  for (std::size_t k = 0; k < widths.size(); ++k) {
    if (params_[2 * k].rows() != fan_in || params_[2 * k].cols() != widths[k] ||
        params_[2 * k + 1].rows() != 1 || params_[2 * k + 1].cols() != widths[k]) {
      throw std::invalid_argument("mlp: layer " + std::to_string(k) + " has shape W" +
                                  params_[2 * k].shape_string() + " b" +
                                  params_[2 * k + 1].shape_string());
    }
    fan_in = widths[k];
  }
}

std::vector<std::string> Mlp::param_names() const {
  std::vector<std::string> names;
  for (std::size_t k = 0; k < params_.size() / 2; ++k) {
    names.push_back("W" + std::to_string(k));
    names.push_back("b" + std::to_string(k));
  }
  return names;
}

std::vector<Var> Mlp::bind(Tape& tape) const {
  std::vector<Var> vars;
  const auto names = param_names();
  for (std::size_t k = 0; k < params_.size(); ++k) vars.push_back(tape.parameter(params_[k], names[k]));
  return vars;
}

Var Mlp::forward(Tape& tape, std::span<const Var> bound, Var x) const {
  if (bound.size() != params_.size()) {
    throw std::invalid_argument("mlp: bound parameter count mismatch");
  }
  Var h = x;
  const std::size_t layers = bound.size() / 2;
  for (std::size_t k = 0; k < layers; ++k) {
    h = tape.affine(h, bound[2 * k], bound[2 * k + 1]);
    if (k + 1 < layers) h = tape.relu(h);
  }
  return h;
}

GaussianForecaster::GaussianForecaster(std::size_t input_dim, std::vector<std::size_t> hidden,
                                       double sigma_min, Rng& rng)
    : net_(MlpShape{input_dim, std::move(hidden), 2}, rng), sigma_min_(sigma_min) {
  if (!(sigma_min_ > 0.0)) throw std::invalid_argument("gaussian forecaster: sigma_min must be > 0");
}

GaussianForecaster::GaussianForecaster(Mlp net, double sigma_min)
    : net_(std::move(net)), sigma_min_(sigma_min) {
  if (net_.shape().output_dim != 2) {
    throw std::invalid_argument("gaussian forecaster: network must have two outputs");
  }
  if (!(sigma_min_ > 0.0)) throw std::invalid_argument("gaussian forecaster: sigma_min must be > 0");
}

GaussianForecaster::Outputs GaussianForecaster::forward(Tape& tape, std::span<const Var> bound,
                                                        Var x) const {
  Var out = net_.forward(tape, bound, x);
  Var mu = tape.slice_cols(out, 0, 1);
  Var sigma = tape.add_scalar(tape.softplus(tape.slice_cols(out, 1, 2)), sigma_min_);
  return {mu, sigma};
}

GaussianForecasts GaussianForecaster::predict(const Array& x) const {
  Tape tape;
  auto bound = net_.bind(tape);
  auto out = forward(tape, bound, tape.constant(x, "x"));
  const Array& mu = tape.value(out.mu);
  const Array& sigma = tape.value(out.sigma);
  if (!mu.all_finite() || !sigma.all_finite()) {
    throw NumericalError("gaussian forecaster: non-finite activations in prediction");
  }
  GaussianForecasts f;
  f.mu.assign(mu.flat().begin(), mu.flat().end());
  f.sigma.assign(sigma.flat().begin(), sigma.flat().end());
  return f;
}

CategoricalForecaster::CategoricalForecaster(std::size_t input_dim,
                                             std::vector<std::size_t> hidden,
                                             std::size_t classes, Rng& rng)
    : net_(MlpShape{input_dim, std::move(hidden), classes}, rng) {
  if (classes < 2) throw std::invalid_argument("categorical forecaster: need at least 2 classes");
}

CategoricalForecaster::CategoricalForecaster(Mlp net) : net_(std::move(net)) {
  if (classes() < 2) throw std::invalid_argument("categorical forecaster: need at least 2 classes");
}

Var CategoricalForecaster::forward(Tape& tape, std::span<const Var> bound, Var x) const {
  return net_.forward(tape, bound, x);
}

Array CategoricalForecaster::predict_logits(const Array& x) const {
  Tape tape;
  auto bound = net_.bind(tape);
  Array logits = tape.value(forward(tape, bound, tape.constant(x, "x")));
  if (!logits.all_finite()) {
    throw NumericalError("categorical forecaster: non-finite activations in prediction");
  }
  return logits;
}

Var gaussian_nll_sum(Tape& tape, Var mu, Var sigma, Var y) {
  for (double s : tape.value(sigma).flat()) require_sigma(s);
  Var z = tape.div(tape.sub(y, mu), sigma);
  Var per = tape.add(tape.log(sigma), tape.scale(tape.square(z), 0.5));
  const double n = static_cast<double>(tape.value(mu).rows());
  return tape.add_scalar(tape.sum(per), n * kHalfLog2Pi);
}

Var xent_sum(Tape& tape, Var logits, std::span<const std::size_t> y) {
  return tape.scale(tape.sum(tape.pick(tape.log_softmax(logits), y)), -1.0);
}

Var reparam_sample(Tape& tape, Var mu, Var sigma, const Array& eps) {
  const std::size_t n = tape.value(mu).rows();
  if (n == 0 || eps.rows() % n != 0 || eps.cols() != 1) {
    throw ShapeError("reparam_sample: noise " + eps.shape_string() + " does not tile " +
                     std::to_string(n) + " examples");
  }
  const std::size_t s = eps.rows() / n;
  Var e = tape.constant(eps, "eps");
  return tape.add(tape.repeat_rows(mu, s), tape.mul(tape.repeat_rows(sigma, s), e));
}

}  // namespace calikit
