#include "calikit/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "calikit/mmd.hpp"
#include "calikit/normal.hpp"
#include "calikit/parallel.hpp"

namespace calikit {

namespace {

void require_nonempty(std::size_t n, const char* what) {
  if (n == 0) throw std::invalid_argument(std::string(what) + ": empty dataset");
}

void require_sizes(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(a) +
                                " forecasts for " + std::to_string(b) + " labels");
  }
}

}  // namespace

std::vector<double> pits(const GaussianForecasts& f, std::span<const double> ys) {
  require_sizes(f.size(), ys.size(), "pits");
  std::vector<double> out(ys.size());
  for (std::size_t i = 0; i < ys.size(); ++i) out[i] = gaussian_cdf(f.mu[i], f.sigma[i], ys[i]);
  return out;
}

double qce_from_pits(std::span<const double> pit, std::size_t levels) {
  require_nonempty(pit.size(), "qce");
  if (levels < 2) throw std::invalid_argument("qce: need at least 2 levels");
  std::vector<double> sorted(pit.begin(), pit.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  double total = 0.0;
  for (std::size_t j = 1; j <= levels; ++j) {
    const double c = static_cast<double>(j) / static_cast<double>(levels + 1);
    const auto covered = std::upper_bound(sorted.begin(), sorted.end(), c) - sorted.begin();
    total += std::abs(static_cast<double>(covered) / n - c);
  }
  return total / static_cast<double>(levels);
}

double qce(const GaussianForecasts& f, std::span<const double> ys, std::size_t levels) {
  return qce_from_pits(pits(f, ys), levels);
}

double ece(const Array& pmf, std::span<const std::size_t> ys, std::size_t bins) {
  require_nonempty(pmf.rows(), "ece");
  require_sizes(pmf.rows(), ys.size(), "ece");
  if (bins == 0) throw std::invalid_argument("ece: need at least one bin");
  std::vector<double> conf_sum(bins, 0.0), correct(bins, 0.0), count(bins, 0.0);
  for (std::size_t i = 0; i < pmf.rows(); ++i) {
    auto row = pmf.row_span(i);
    const std::size_t top = std::max_element(row.begin(), row.end()) - row.begin();
    const double conf = row[top];
    const std::size_t b =
        std::min(static_cast<std::size_t>(conf * static_cast<double>(bins)), bins - 1);
    conf_sum[b] += conf;
    correct[b] += top == ys[i] ? 1.0 : 0.0;
    count[b] += 1.0;
  }
  double total = 0.0;
  for (std::size_t b = 0; b < bins; ++b)
    if (count[b] > 0) total += std::abs(correct[b] - conf_sum[b]);
  return total / static_cast<double>(pmf.rows());
}

DceResult dce(const GaussianForecasts& f, std::span<const double> ys, double c) {
  require_sizes(f.size(), ys.size(), "dce");
  std::vector<double> q(ys.size());
  for (std::size_t i = 0; i < ys.size(); ++i) q[i] = gaussian_cdf(f.mu[i], f.sigma[i], c);
  return dce_from_cdf(q, ys, c);
}

DceResult dce_from_cdf(std::span<const double> cdf_at_c, std::span<const double> ys, double c) {
  require_nonempty(ys.size(), "dce");
  require_sizes(cdf_at_c.size(), ys.size(), "dce");
  const double n = static_cast<double>(ys.size());
  double emp_plus = 0.0, emp_minus = 0.0, fc_plus = 0.0;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    // l(+1, y) = 1{sign(y - c) != +1}, l(-1, y) = 1{sign(y - c) != -1}.
    emp_plus += ys[i] <= c ? 1.0 : 0.0;
    emp_minus += ys[i] >= c ? 1.0 : 0.0;
    fc_plus += cdf_at_c[i];
  }
  DceResult r;
  r.gap_plus = emp_plus / n - fc_plus / n;
  r.gap_minus = emp_minus / n - (1.0 - fc_plus / n);
  r.dce_squared = r.gap_plus * r.gap_plus + r.gap_minus * r.gap_minus;
  r.dce = std::sqrt(r.dce_squared);
  return r;
}

LceQuery lce_at(std::span<const double> pit, const Array& phi_data,
                std::span<const double> query, const KernelSpec& kernel, std::size_t levels) {
  require_sizes(pit.size(), phi_data.rows(), "lce");
  if (levels == 0) throw std::invalid_argument("lce: need at least one level");
  std::vector<double> covered(levels, 0.0);
  LceQuery q;
  for (std::size_t i = 0; i < pit.size(); ++i) {
    const double w = kernel.eval(query, phi_data.row_span(i));
    if (w == 0.0) continue;
    q.weight_sum += w;
    // y_i <= Q_i^-1(c) exactly when the PIT is at most c.
    for (std::size_t l = 0; l < levels; ++l) {
      const double c = static_cast<double>(l + 1) / static_cast<double>(levels);
      if (pit[i] <= c) covered[l] += w;
    }
  }
  if (!(q.weight_sum > 0.0)) {
    std::string where;
    for (double v : query) where += (where.empty() ? "" : ", ") + std::to_string(v);
    throw ZeroWeightError("lce: all kernel weights vanish at query (" + where + ")");
  }
  q.per_level.resize(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    const double c = static_cast<double>(l + 1) / static_cast<double>(levels);
    q.per_level[l] = covered[l] / q.weight_sum - c;
    q.total += q.per_level[l] * q.per_level[l];
  }
  q.total /= static_cast<double>(levels);
  return q;
}

LceResult lce(const GaussianForecasts& f, std::span<const double> ys, const Array& phi_data,
              const Array& queries, const KernelSpec& kernel, std::size_t levels) {
  return lce_from_pits(pits(f, ys), phi_data, queries, kernel, levels);
}

LceResult lce_from_pits(std::span<const double> pit, const Array& phi_data, const Array& queries,
                        const KernelSpec& kernel, std::size_t levels) {
  LceResult r;
  r.total.assign(queries.rows(), 0.0);
  parallel_rows(queries.rows(), [&](std::size_t k) {
    r.total[k] = lce_at(pit, phi_data, queries.row_span(k), kernel, levels).total;
  });
  double s = 0.0;
  for (double v : r.total) s += v;
  r.mean_total = queries.rows() ? s / static_cast<double>(queries.rows()) : 0.0;
  return r;
}

KernelSpec default_kce_kernel(std::size_t feature_dim, bool classification) {
  return KernelSpec::product(classification ? KernelSpec::delta() : KernelSpec::rbf_median(),
                             KernelSpec::rbf_median(), Slice{0, 1}, Slice{1, 1 + feature_dim});
}

double kce_regression(const Array& x, std::span<const double> ys, const GaussianForecasts& f,
                      const KernelSpec& kernel, std::size_t samples, Rng& rng) {
  require_sizes(f.size(), ys.size(), "kce");
  std::vector<double> draws(ys.size() * samples);
  for (std::size_t i = 0; i < ys.size(); ++i)
    for (std::size_t s = 0; s < samples; ++s)
      draws[i * samples + s] = f.mu[i] + f.sigma[i] * normal_icdf(rng.uniform_open());
  return kce_regression_samples(x, ys, draws, samples, kernel);
}

double kce_regression_samples(const Array& x, std::span<const double> ys,
                              std::span<const double> samples, std::size_t s,
                              const KernelSpec& kernel) {
  require_sizes(x.rows(), ys.size(), "kce");
  require_sizes(samples.size(), ys.size() * s, "kce");
  const std::size_t n = ys.size(), d = x.cols();
  Array target(n, 1 + d), forecast(n * s, 1 + d);
  for (std::size_t i = 0; i < n; ++i) {
    target(i, 0) = ys[i];
    for (std::size_t c = 0; c < d; ++c) target(i, 1 + c) = x(i, c);
    for (std::size_t k = 0; k < s; ++k) {
      const std::size_t r = i * s + k;
      forecast(r, 0) = samples[r];
      for (std::size_t c = 0; c < d; ++c) forecast(r, 1 + c) = x(i, c);
    }
  }
  const KernelSpec k = kernel.resolved() ? kernel : resolve_bandwidths(kernel, target);
  return mmd_usq_regression(k, target, forecast, s).value;
}

double kce_classification(const Array& x, std::span<const std::size_t> ys, const Array& pmf,
                          const KernelSpec& kernel) {
  require_sizes(pmf.rows(), ys.size(), "kce");
  KernelSpec k = kernel;
  if (!k.resolved()) {
    Array rows(x.rows(), 1 + x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      rows(i, 0) = static_cast<double>(ys[i]);
      for (std::size_t c = 0; c < x.cols(); ++c) rows(i, 1 + c) = x(i, c);
    }
    k = resolve_bandwidths(kernel, rows);
  }
  return mmd_usq_classification(k, ys, pmf, &x).value;
}

double accuracy(const Array& pmf, std::span<const std::size_t> ys) {
  require_nonempty(pmf.rows(), "accuracy");
  require_sizes(pmf.rows(), ys.size(), "accuracy");
  double hits = 0.0;
  for (std::size_t i = 0; i < pmf.rows(); ++i) {
    auto row = pmf.row_span(i);
    std::size_t best = 0;
    for (std::size_t k = 1; k < row.size(); ++k)
      if (row[k] > row[best]) best = k;
    hits += best == ys[i] ? 1.0 : 0.0;
  }
  return hits / static_cast<double>(pmf.rows());
}

double nll_eval(const GaussianForecasts& f, std::span<const double> ys) {
  require_nonempty(ys.size(), "nll");
  require_sizes(f.size(), ys.size(), "nll");
  double s = 0.0;
  for (std::size_t i = 0; i < ys.size(); ++i) s += gaussian_nll(f.mu[i], f.sigma[i], ys[i]);
  return s / static_cast<double>(ys.size());
}

double nll_eval(const Array& pmf, std::span<const std::size_t> ys) {
  require_nonempty(pmf.rows(), "nll");
  require_sizes(pmf.rows(), ys.size(), "nll");
  double s = 0.0;
  for (std::size_t i = 0; i < pmf.rows(); ++i) s += xent(pmf.row_span(i), ys[i]);
  return s / static_cast<double>(pmf.rows());
}

double mean_entropy(const Array& pmf) {
  require_nonempty(pmf.rows(), "entropy");
  double s = 0.0;
  for (std::size_t i = 0; i < pmf.rows(); ++i) s += entropy(pmf.row_span(i));
  return s / static_cast<double>(pmf.rows());
}

void MetricReport::set(const std::string& key, double v) {
  if (!std::isfinite(v)) throw std::runtime_error("metric " + key + " is not finite");
  values[key] = v;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values) j[k] = v;
  j["meta"] = meta;
  return j;
}

}  // namespace calikit
