#include "calikit/reference.hpp"

#include <stdexcept>
#include <vector>

namespace calikit::reference {

Array gram(const KernelSpec& spec, const Array& u, const Array& v) {
  Array g(u.rows(), v.rows());
  for (std::size_t i = 0; i < u.rows(); ++i)
    for (std::size_t j = 0; j < v.rows(); ++j) g(i, j) = spec.eval(u.row_span(i), v.row_span(j));
  return g;
}

double mmd_usq_regression(const KernelSpec& kernel, const Array& target, const Array& forecast,
                          std::size_t samples) {
  const std::size_t n = target.rows();
  if (n < 2) throw std::invalid_argument("reference mmd: need at least two examples");
  auto f = [&](std::size_t i, std::size_t s) { return forecast.row_span(i * samples + s); };
  const double inv_s = 1.0 / static_cast<double>(samples);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double ff = 0.0, tf = 0.0, ft = 0.0;
      for (std::size_t s = 0; s < samples; ++s) {
        for (std::size_t s2 = 0; s2 < samples; ++s2) ff += kernel.eval(f(i, s), f(j, s2));
        tf += kernel.eval(target.row_span(i), f(j, s));
        ft += kernel.eval(target.row_span(j), f(i, s));
      }
      total += kernel.eval(target.row_span(i), target.row_span(j)) + ff * inv_s * inv_s -
               tf * inv_s - ft * inv_s;
    }
  }
  return total / (static_cast<double>(n) * static_cast<double>(n - 1));
}

double mmd_usq_classification(const KernelSpec& kernel, std::span<const std::size_t> labels,
                              const Array& pmf, const Array* z) {
  const std::size_t n = pmf.rows();
  const std::size_t m = pmf.cols();
  if (n < 2) throw std::invalid_argument("reference mmd: need at least two examples");
  const std::size_t dz = z ? z->cols() : 0;
  auto row = [&](double label, std::size_t i) {
    std::vector<double> r(1 + dz);
    r[0] = label;
    for (std::size_t c = 0; c < dz; ++c) r[1 + c] = (*z)(i, c);
    return r;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const auto yi = row(static_cast<double>(labels[i]), i);
      const auto yj = row(static_cast<double>(labels[j]), j);
      double h = kernel.eval(yi, yj);
      for (std::size_t a = 0; a < m; ++a) {
        const auto ai = row(static_cast<double>(a), i);
        for (std::size_t b = 0; b < m; ++b)
          h += pmf(i, a) * pmf(j, b) * kernel.eval(ai, row(static_cast<double>(b), j));
        h -= 2.0 * pmf(i, a) * kernel.eval(ai, yj);
      }
      total += h;
    }
  }
  return total / (static_cast<double>(n) * static_cast<double>(n - 1));
}

}  // namespace calikit::reference
