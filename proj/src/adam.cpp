#include "calikit/adam.hpp"

#include <cmath>
#include <stdexcept>

#include "calikit/autodiff.hpp"

namespace calikit {

void adam_step(Array& param, const Array& grad, AdamState& state, const AdamConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
  if (!param.same_shape(grad)) {
    throw std::invalid_argument("adam: gradient shape " + grad.shape_string() +
                                " does not match parameter " + param.shape_string());
  }
  if (!grad.all_finite()) throw NumericalError("adam: non-finite gradient");
  if (state.m.size() == 0) {
    state.m = Array(param.rows(), param.cols());
    state.v = Array(param.rows(), param.cols());
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

void Adam::step(std::span<Array> params, std::span<const Array> grads) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("adam: parameter and gradient counts differ");
  }
  if (states_.empty()) states_.resize(params.size());
  if (states_.size() != params.size()) {
    throw std::invalid_argument("adam: parameter count changed between steps");
  }
  for (std::size_t k = 0; k < params.size(); ++k) adam_step(params[k], grads[k], states_[k], cfg_);
}

}  // namespace calikit
