#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "calikit/array.hpp"

namespace calikit {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment estimates for one parameter array.
struct AdamState {
  Array m;
  Array v;
  std::size_t step = 0;
};

// One bias-corrected Adam update of `param` in place. Throws NumericalError on
// non-finite gradients and std::invalid_argument on shape mismatch or lr <= 0.
void adam_step(Array& param, const Array& grad, AdamState& state, const AdamConfig& cfg);

// Adam over an ordered list of parameter arrays.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  void step(std::span<Array> params, std::span<const Array> grads);
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<AdamState> states_;
};

}  // namespace calikit
