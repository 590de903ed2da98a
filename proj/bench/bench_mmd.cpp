// Times the parallel Gram and MMD estimators against the serial reference
// versions and checks that both agree.
//
//   bench_mmd [n] [samples] [repeats]

#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>

#include "calikit/kernels.hpp"
#include "calikit/mmd.hpp"
#include "calikit/reference.hpp"
#include "calikit/rng.hpp"

using namespace calikit;

namespace {

double best_ms(int repeats, const std::function<void()>& f) {
  double best = 1e300;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

}  // namespace

int main(int argc, char** argv) {
  const std::size_t n = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 256;
  const std::size_t s = argc > 2 ? std::strtoul(argv[2], nullptr, 10) : 10;
  const int repeats = argc > 3 ? std::atoi(argv[3]) : 3;
  const std::size_t dz = 4;

  Rng rng(42);
  Array target(n, 1 + dz), forecast(n * s, 1 + dz);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 1 + dz; ++c) target(i, c) = rng.normal();
    for (std::size_t k = 0; k < s; ++k) {
      forecast(i * s + k, 0) = rng.normal();
      for (std::size_t c = 1; c < 1 + dz; ++c) forecast(i * s + k, c) = target(i, c);
    }
  }
  const KernelSpec kernel = KernelSpec::product(KernelSpec::rbf(0.7), KernelSpec::rbf(1.5),
                                                Slice{0, 1}, Slice{1, 1 + dz});

  std::printf("threads=%d n=%zu samples=%zu\n", omp_get_max_threads(), n, s);

  Array g_par, g_ref;
  const double gram_par = best_ms(repeats, [&] { g_par = gram(kernel, forecast, forecast); });
  const double gram_ref = best_ms(repeats, [&] { g_ref = reference::gram(kernel, forecast, forecast); });
  std::printf("gram        parallel %9.2f ms  reference %9.2f ms  speedup %5.2fx  identical=%s\n",
              gram_par, gram_ref, gram_ref / gram_par, g_par == g_ref ? "yes" : "no");

  double v_par = 0.0, v_ref = 0.0;
  const double mmd_par = best_ms(repeats, [&] { v_par = mmd_usq_regression(kernel, target, forecast, s).value; });
  const double mmd_ref = best_ms(repeats, [&] { v_ref = reference::mmd_usq_regression(kernel, target, forecast, s); });
  std::printf("mmd         parallel %9.2f ms  reference %9.2f ms  speedup %5.2fx  |diff|=%.3g\n",
              mmd_par, mmd_ref, mmd_ref / mmd_par, std::abs(v_par - v_ref));

  RegressionMmdGrad grad;
  const double mmd_grad = best_ms(repeats, [&] { mmd_usq_regression(kernel, target, forecast, s, &grad); });
  std::printf("mmd+grad    parallel %9.2f ms\n", mmd_grad);
  return 0;
}
