#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace calikit {

// Seeded generator with portable transforms. The engine is std::mt19937_64,
// whose output sequence is fixed by the standard; uniform and normal variates
// are derived here rather than through <random> distributions, whose
// algorithms differ between standard libraries.
class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "mt19937_64+u53+box-muller";

  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform on the open interval (0, 1).
  double uniform_open();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  // Uniform integer in [0, n), rejection-sampled without modulo bias.
  std::uint64_t below(std::uint64_t n);

  // Derives an independent child stream, e.g. one per epoch or purpose.
  Rng fork(std::uint64_t tag);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 finalizer; used to derive seeds for named sub-streams.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

}  // namespace calikit
