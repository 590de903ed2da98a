#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "calikit/array.hpp"
#include "calikit/autodiff.hpp"
#include "calikit/rng.hpp"

namespace calikit {

// Per-example Gaussian predictive distributions.
struct GaussianForecasts {
  std::vector<double> mu;
  std::vector<double> sigma;
  std::size_t size() const { return mu.size(); }
};

double gaussian_nll(double mu, double sigma, double y);
double gaussian_pdf(double mu, double sigma, double y);
double gaussian_cdf(double mu, double sigma, double y);
// Throws std::domain_error unless p is in (0, 1).
double gaussian_icdf(double mu, double sigma, double p);

// Cross-entropy -log pmf[y]. Probabilities below 1e-12 are clamped and counted.
double xent(std::span<const double> pmf, std::size_t y, std::size_t* clamp_count = nullptr);
// Shannon entropy in nats, with 0 log 0 = 0.
double entropy(std::span<const double> pmf);
// Row-wise softmax(logits / temperature).
Array softmax_rows(const Array& logits, double temperature = 1.0);

struct MlpShape {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  std::size_t output_dim = 0;
};

// Fully connected network: relu after every hidden layer, linear output.
// Parameters are stored as W0, b0, W1, b1, ... with Wk of shape in x out.
class Mlp {
 public:
  // He-style initialisation: W ~ N(0, 2 / fan_in), b = 0.
  Mlp(MlpShape shape, Rng& rng);
  Mlp(MlpShape shape, std::vector<Array> params);

  const MlpShape& shape() const { return shape_; }
  std::vector<Array>& params() { return params_; }
  const std::vector<Array>& params() const { return params_; }
  std::vector<std::string> param_names() const;

  std::vector<Var> bind(Tape& tape) const;
  Var forward(Tape& tape, std::span<const Var> bound, Var x) const;

 private:
  MlpShape shape_;
  std::vector<Array> params_;
};

// mu(x) and sigma(x) = softplus(s(x)) + sigma_min from a two-output head.
class GaussianForecaster {
 public:
  struct Outputs {
    Var mu;
    Var sigma;
  };

  GaussianForecaster(std::size_t input_dim, std::vector<std::size_t> hidden, double sigma_min,
                     Rng& rng);
  GaussianForecaster(Mlp net, double sigma_min);

  Outputs forward(Tape& tape, std::span<const Var> bound, Var x) const;
  GaussianForecasts predict(const Array& x) const;

  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }
  double sigma_min() const { return sigma_min_; }

 private:
  Mlp net_;
  double sigma_min_;
};

// Logits over m classes; pmf = softmax(logits).
class CategoricalForecaster {
 public:
  CategoricalForecaster(std::size_t input_dim, std::vector<std::size_t> hidden,
                        std::size_t classes, Rng& rng);
  explicit CategoricalForecaster(Mlp net);

  Var forward(Tape& tape, std::span<const Var> bound, Var x) const;
  Array predict_logits(const Array& x) const;
  Array predict(const Array& x) const { return softmax_rows(predict_logits(x)); }

  std::size_t classes() const { return net_.shape().output_dim; }
  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }

 private:
  Mlp net_;
};

// Sum over rows of 1/2 log(2 pi sigma^2) + (y - mu)^2 / (2 sigma^2).
Var gaussian_nll_sum(Tape& tape, Var mu, Var sigma, Var y);
// Sum over rows of -log softmax(logits)[y].
Var xent_sum(Tape& tape, Var logits, std::span<const std::size_t> y);
// y_hat = mu + sigma * eps for S noise draws per example. eps has n*S rows,
// laid out example-major (row i*S + s); the result has the same layout.
Var reparam_sample(Tape& tape, Var mu, Var sigma, const Array& eps);

}  // namespace calikit
