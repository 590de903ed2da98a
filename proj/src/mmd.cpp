#include "calikit/mmd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "calikit/parallel.hpp"

namespace calikit {

namespace {

void require_resolved(const KernelSpec& kernel) {
  if (!kernel.resolved()) {
    throw std::logic_error("mmd: kernel " + kernel.describe() + " has unresolved bandwidths");
  }
}

void require_batch(std::size_t n) {
  if (n < 2) {
    throw std::invalid_argument("mmd: at least two examples per batch are required, got " +
                                std::to_string(n));
  }
}

double ordered_sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

// Label kernel on scalars; rbf is inlined since it dominates training cost.
// tanh_threshold is a rank-one kernel phi(a) phi(b): labels are mapped through
// phi once per row and the pair kernel becomes a product.
struct LabelKernel {
  enum class Mode { rbf, tanh, generic };
  const KernelSpec* spec = nullptr;
  Mode mode = Mode::generic;
  double gamma = 0.0;  // 1 / (2 bw^2) when rbf
  double c = 0.0;      // threshold when tanh

  explicit LabelKernel(const KernelSpec& k) : spec(&k) {
    if (k.kind() == KernelKind::rbf) {
      mode = Mode::rbf;
      gamma = 0.5 / (k.param() * k.param());
    } else if (k.kind() == KernelKind::tanh_threshold) {
      mode = Mode::tanh;
      c = k.param();
    }
  }
  double map(double x) const { return mode == Mode::tanh ? std::tanh(x - c) : x; }
  // d map / dx, given the mapped value.
  double chain(double m) const { return mode == Mode::tanh ? 1.0 - m * m : 1.0; }
  double value(double a, double b) const {
    if (mode == Mode::rbf) return std::exp(-gamma * (a - b) * (a - b));
    if (mode == Mode::tanh) return a * b;
    return spec->eval(std::span<const double>(&a, 1), std::span<const double>(&b, 1));
  }
  // Returns k(a, b) and stores dk/da in *d, both in mapped coordinates.
  double value_grad(double a, double b, double* d) const {
    if (mode == Mode::rbf) {
      const double k = std::exp(-gamma * (a - b) * (a - b));
      *d = -2.0 * gamma * (a - b) * k;
      return k;
    }
    if (mode == Mode::tanh) {
      *d = b;
      return a * b;
    }
    *d = 0.0;
    return spec->eval_grad(std::span<const double>(&a, 1), std::span<const double>(&b, 1),
                           std::span<double>(d, 1), 1.0);
  }
};

// k((t, z), (t', z')) = k_t(t, t') k_z(z, z') with every forecast row of an
// example sharing that example's z. The z factor is then needed once per
// example pair instead of once per sample pair. `zk` is null when the kernel
// sees the label alone.
bool separable_layout(const KernelSpec& kernel, const Array& target, const Array& forecast,
                      std::size_t samples, const KernelSpec** tk, const KernelSpec** zk) {
  const std::size_t dim = target.cols();
  if (dim == 1) {
    *tk = &kernel;
    *zk = nullptr;
    return true;
  }
  if (kernel.kind() != KernelKind::product || kernel.left_slice() != Slice{0, 1} ||
      kernel.right_slice() != Slice{1, dim}) {
    return false;
  }
  for (std::size_t r = 0; r < forecast.rows(); ++r) {
    auto f = forecast.row_span(r);
    auto t = target.row_span(r / samples);
    for (std::size_t c = 1; c < dim; ++c)
      if (f[c] != t[c]) return false;
  }
  *tk = &kernel.left();
  *zk = &kernel.right();
  return true;
}

double separable_regression(const KernelSpec& label_kernel, const KernelSpec* z_kernel,
                            const Array& target, const Array& forecast, std::size_t samples,
                            RegressionMmdGrad* grad) {
  const std::size_t n = target.rows();
  const std::size_t dim = target.cols();
  const std::size_t dz = dim - 1;
  const LabelKernel kt(label_kernel);
  const double inv_s = 1.0 / static_cast<double>(samples);
  const double inv_s2 = inv_s * inv_s;
  const double norm = 1.0 / (static_cast<double>(n) * static_cast<double>(n - 1));

  std::vector<double> tm(n), fm(n * samples);
  for (std::size_t i = 0; i < n; ++i) tm[i] = kt.map(target(i, 0));
  for (std::size_t r = 0; r < fm.size(); ++r) fm[r] = kt.map(forecast(r, 0));

  std::vector<double> row_value(n, 0.0);
  parallel_rows(n, [&](std::size_t i) {
    const double ti = tm[i];
    auto zi = target.row_span(i).subspan(1);
    std::vector<double> dkz(dz);
    double tt = 0.0, tf = 0.0, ff = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      auto zj = target.row_span(j).subspan(1);
      double kz = 1.0;
      if (z_kernel) {
        if (grad) {
          std::fill(dkz.begin(), dkz.end(), 0.0);
          kz = z_kernel->eval_grad(zi, zj, dkz, 1.0);
        } else {
          kz = z_kernel->eval(zi, zj);
        }
      }
      const double tj = tm[j];
      if (!grad) {
        double a = kt.value(ti, tj), b = 0.0, c = 0.0;
        for (std::size_t s = 0; s < samples; ++s) {
          const double fjs = fm[j * samples + s];
          b += kt.value(ti, fjs);
          for (std::size_t s2 = 0; s2 < samples; ++s2)
            c += kt.value(fm[i * samples + s2], fjs);
        }
        tt += kz * a;
        tf += kz * b;
        ff += kz * c;
        continue;
      }

      // Target row i.
      double d = 0.0;
      const double a = kt.value_grad(ti, tj, &d);
      double dt = 2.0 * norm * kz * d;
      double b = 0.0;
      for (std::size_t s = 0; s < samples; ++s) {
        const double k = kt.value_grad(ti, fm[j * samples + s], &d);
        b += k;
        dt -= 2.0 * norm * inv_s * kz * d;
      }
      grad->d_target(i, 0) += dt * kt.chain(ti);
      const double wz_target = 2.0 * norm * a - 2.0 * norm * inv_s * b;
      for (std::size_t c = 0; c < dz; ++c) grad->d_target(i, 1 + c) += wz_target * dkz[c];
      tt += kz * a;
      tf += kz * b;

      // Forecast rows (i, s).
      for (std::size_t s = 0; s < samples; ++s) {
        const std::size_t r = i * samples + s;
        const double fis = fm[r];
        double c_sum = 0.0, df = 0.0;
        for (std::size_t s2 = 0; s2 < samples; ++s2) {
          c_sum += kt.value_grad(fis, fm[j * samples + s2], &d);
          df += 2.0 * norm * inv_s2 * kz * d;
        }
        const double kft = kt.value_grad(fis, tj, &d);
        df -= 2.0 * norm * inv_s * kz * d;
        grad->d_forecast(r, 0) += df * kt.chain(fis);
        const double wz = 2.0 * norm * inv_s2 * c_sum - 2.0 * norm * inv_s * kft;
        for (std::size_t c = 0; c < dz; ++c) grad->d_forecast(r, 1 + c) += wz * dkz[c];
        ff += kz * c_sum;
      }
    }
    row_value[i] = tt + ff * inv_s2 - 2.0 * tf * inv_s;
  });
  return norm * ordered_sum(row_value);
}

}  // namespace

MmdEstimate mmd_usq_regression(const KernelSpec& kernel, const Array& target,
                               const Array& forecast, std::size_t samples,
                               RegressionMmdGrad* grad) {
  const std::size_t n = target.rows();
  const std::size_t dim = target.cols();
  require_batch(n);
  require_resolved(kernel);
  if (samples == 0) throw std::invalid_argument("mmd: samples per forecast must be >= 1");
  if (forecast.rows() != n * samples || forecast.cols() != dim) {
    throw std::invalid_argument("mmd: forecast block " + forecast.shape_string() +
                                " does not match " + std::to_string(n) + " examples x " +
                                std::to_string(samples) + " samples x " + std::to_string(dim));
  }
  if (grad) {
    grad->d_target = Array(n, dim);
    grad->d_forecast = Array(n * samples, dim);
  }

  const KernelSpec* label_kernel = nullptr;
  const KernelSpec* z_kernel = nullptr;
  if (separable_layout(kernel, target, forecast, samples, &label_kernel, &z_kernel)) {
    return MmdEstimate{separable_regression(*label_kernel, z_kernel, target, forecast, samples, grad),
                       n, samples, kernel};
  }

  const double inv_s = 1.0 / static_cast<double>(samples);
  const double inv_s2 = inv_s * inv_s;
  const double norm = 1.0 / (static_cast<double>(n) * static_cast<double>(n - 1));
  std::vector<double> row_value(n, 0.0);

  // Row i owns every term whose first kernel argument belongs to example i.
  // By symmetry of h_ij this covers each ordered pair once and lets each row
  // write gradients only into its own slots.
  parallel_rows(n, [&](std::size_t i) {
    auto ti = target.row_span(i);
    double tt = 0.0, ff = 0.0, tf = 0.0;
    if (grad) {
      auto dti = grad->d_target.row_span(i);
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        tt += kernel.eval_grad(ti, target.row_span(j), dti, 2.0 * norm);
        for (std::size_t s = 0; s < samples; ++s)
          tf += kernel.eval_grad(ti, forecast.row_span(j * samples + s), dti,
                                 -2.0 * norm * inv_s);
      }
      for (std::size_t s = 0; s < samples; ++s) {
        auto fis = forecast.row_span(i * samples + s);
        auto dfis = grad->d_forecast.row_span(i * samples + s);
        for (std::size_t j = 0; j < n; ++j) {
          if (j == i) continue;
          for (std::size_t s2 = 0; s2 < samples; ++s2)
            ff += kernel.eval_grad(fis, forecast.row_span(j * samples + s2), dfis,
                                   2.0 * norm * inv_s2);
          kernel.eval_grad(fis, target.row_span(j), dfis, -2.0 * norm * inv_s);
        }
      }
    } else {
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        tt += kernel.eval(ti, target.row_span(j));
        for (std::size_t s = 0; s < samples; ++s)
          tf += kernel.eval(ti, forecast.row_span(j * samples + s));
      }
      for (std::size_t s = 0; s < samples; ++s) {
        auto fis = forecast.row_span(i * samples + s);
        for (std::size_t j = 0; j < n; ++j) {
          if (j == i) continue;
          for (std::size_t s2 = 0; s2 < samples; ++s2)
            ff += kernel.eval(fis, forecast.row_span(j * samples + s2));
        }
      }
    }
    row_value[i] = tt + ff * inv_s2 - 2.0 * tf * inv_s;
  });

  return MmdEstimate{norm * ordered_sum(row_value), n, samples, kernel};
}

MmdEstimate mmd_usq_classification(const KernelSpec& kernel, std::span<const std::size_t> labels,
                                   const Array& pmf, const Array* z, ClassificationMmdGrad* grad) {
  const std::size_t n = pmf.rows();
  const std::size_t outcomes = pmf.cols();
  const std::size_t dz = z ? z->cols() : 0;
  const std::size_t dim = 1 + dz;
  require_batch(n);
  require_resolved(kernel);
  if (labels.size() != n) throw std::invalid_argument("mmd: label count does not match pmf rows");
  if (z && z->rows() != n) throw std::invalid_argument("mmd: z rows do not match pmf rows");
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t a = 0; a < outcomes; ++a) {
      if (!(pmf(i, a) >= 0.0)) throw std::invalid_argument("mmd: pmf has a negative entry");
      total += pmf(i, a);
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw std::invalid_argument("mmd: pmf row " + std::to_string(i) + " sums to " +
                                  std::to_string(total));
    }
    if (labels[i] >= outcomes) throw std::invalid_argument("mmd: label outside pmf support");
  }

  // Kernel inputs: observed rows (y_i, z_i) and hypothetical rows (a, z_i).
  Array observed(n, dim);
  Array outcome_rows(n * outcomes, dim);
  for (std::size_t i = 0; i < n; ++i) {
    observed(i, 0) = static_cast<double>(labels[i]);
    for (std::size_t a = 0; a < outcomes; ++a) outcome_rows(i * outcomes + a, 0) = static_cast<double>(a);
    for (std::size_t c = 0; c < dz; ++c) {
      observed(i, 1 + c) = (*z)(i, c);
      for (std::size_t a = 0; a < outcomes; ++a) outcome_rows(i * outcomes + a, 1 + c) = (*z)(i, c);
    }
  }
  if (grad) {
    grad->d_pmf = Array(n, outcomes);
    grad->d_z = Array(n, dz);
  }

  const double norm = 1.0 / (static_cast<double>(n) * static_cast<double>(n - 1));
  std::vector<double> row_value(n, 0.0);

  parallel_rows(n, [&](std::size_t i) {
    auto ui = observed.row_span(i);
    std::vector<double> du(dim, 0.0);
    double t1 = 0.0, t2 = 0.0, t3 = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      auto uj = observed.row_span(j);
      t1 += grad ? kernel.eval_grad(ui, uj, du, 2.0 * norm) : kernel.eval(ui, uj);
      for (std::size_t a = 0; a < outcomes; ++a) {
        const double qa = pmf(i, a);
        auto uia = outcome_rows.row_span(i * outcomes + a);
        for (std::size_t b = 0; b < outcomes; ++b) {
          const double qb = pmf(j, b);
          auto ujb = outcome_rows.row_span(j * outcomes + b);
          const double k = grad ? kernel.eval_grad(uia, ujb, du, 2.0 * norm * qa * qb)
                                : kernel.eval(uia, ujb);
          t2 += qa * qb * k;
          if (grad) grad->d_pmf(i, a) += 2.0 * norm * qb * k;
        }
        const double k3 = grad ? kernel.eval_grad(uia, uj, du, -2.0 * norm * qa)
                               : kernel.eval(uia, uj);
        t3 += qa * k3;
        if (grad) grad->d_pmf(i, a) -= 2.0 * norm * k3;
      }
      if (grad) {
        // Terms where example i sits in the second argument of the cross sum.
        for (std::size_t b = 0; b < outcomes; ++b)
          kernel.eval_grad(ui, outcome_rows.row_span(j * outcomes + b), du,
                           -2.0 * norm * pmf(j, b));
      }
    }
    row_value[i] = t1 + t2 - 2.0 * t3;
    if (grad)
      for (std::size_t c = 0; c < dz; ++c) grad->d_z(i, c) = du[1 + c];
  });

  return MmdEstimate{norm * ordered_sum(row_value), n, 1, kernel};
}

Var mmd_regression(Tape& tape, const KernelSpec& kernel, Var target, Var forecast,
                   std::size_t samples) {
  if (!tape.grad_enabled()) {
    auto est = mmd_usq_regression(kernel, tape.value(target), tape.value(forecast), samples);
    return tape.custom("mmd_regression", {target, forecast}, Array::scalar(est.value), nullptr);
  }
  RegressionMmdGrad g;
  auto est = mmd_usq_regression(kernel, tape.value(target), tape.value(forecast), samples, &g);
  return tape.custom("mmd_regression", {target, forecast}, Array::scalar(est.value),
                     [g = std::move(g)](const Array& out, std::span<Array* const> pg) {
                       const double s = out[0];
                       for (std::size_t k = 0; k < g.d_target.size(); ++k)
                         (*pg[0])[k] += s * g.d_target[k];
                       for (std::size_t k = 0; k < g.d_forecast.size(); ++k)
                         (*pg[1])[k] += s * g.d_forecast[k];
                     });
}

Var mmd_classification(Tape& tape, const KernelSpec& kernel, std::span<const std::size_t> labels,
                       Var pmf, std::optional<Var> z) {
  const Array* zv = z ? &tape.value(*z) : nullptr;
  std::vector<Var> parents{pmf};
  if (z) parents.push_back(*z);
  if (!tape.grad_enabled()) {
    auto est = mmd_usq_classification(kernel, labels, tape.value(pmf), zv);
    return tape.custom("mmd_classification", parents, Array::scalar(est.value), nullptr);
  }
  ClassificationMmdGrad g;
  auto est = mmd_usq_classification(kernel, labels, tape.value(pmf), zv, &g);
  return tape.custom("mmd_classification", parents, Array::scalar(est.value),
                     [g = std::move(g)](const Array& out, std::span<Array* const> pg) {
                       const double s = out[0];
                       for (std::size_t k = 0; k < g.d_pmf.size(); ++k)
                         (*pg[0])[k] += s * g.d_pmf[k];
                       if (pg.size() > 1)
                         for (std::size_t k = 0; k < g.d_z.size(); ++k)
                           (*pg[1])[k] += s * g.d_z[k];
                     });
}

double population_mmd_oracle(const DiscreteDistribution& p, const DiscreteDistribution& q,
                             const KernelSpec& kernel) {
  auto expect = [&](const DiscreteDistribution& a, const DiscreteDistribution& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.points.rows(); ++i)
      for (std::size_t j = 0; j < b.points.rows(); ++j)
        s += a.weights[i] * b.weights[j] * kernel.eval(a.points.row_span(i), b.points.row_span(j));
    return s;
  };
  return expect(p, p) + expect(q, q) - 2.0 * expect(p, q);
}

TrainingLoss regression_training_loss(Tape& tape, const GaussianForecaster& model,
                                      std::span<const Var> bound, const BatchView& batch,
                                      const CalibrationTask& task, const KernelSpec& kernel,
                                      const Objective& objective, Rng& rng) {
  if (!(objective.lambda >= 0.0)) throw std::invalid_argument("objective: lambda must be >= 0");
  auto out = model.forward(tape, bound, tape.constant(batch.x, "x"));
  Var y = tape.constant(Array::column(batch.y), "y");
  Var nll = gaussian_nll_sum(tape, out.mu, out.sigma, y);
  if (objective.lambda == 0.0) return {nll, nll, std::nullopt};
  auto pairs = build_regression_pairs(tape, task, out, batch, objective.samples, rng);
  Var mmd = mmd_regression(tape, kernel, pairs.target, pairs.forecast, objective.samples);
  return {tape.add(nll, tape.scale(mmd, objective.lambda)), nll, mmd};
}

TrainingLoss classification_training_loss(Tape& tape, const CategoricalForecaster& model,
                                          std::span<const Var> bound, const BatchView& batch,
                                          const CalibrationTask& task, const KernelSpec& kernel,
                                          const Objective& objective) {
  if (!(objective.lambda >= 0.0)) throw std::invalid_argument("objective: lambda must be >= 0");
  Var logits = model.forward(tape, bound, tape.constant(batch.x, "x"));
  std::vector<std::size_t> labels(batch.y.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::size_t>(batch.y[i]);
  Var xe = xent_sum(tape, logits, labels);
  if (objective.lambda == 0.0) return {xe, xe, std::nullopt};
  auto channels = build_classification_pairs(tape, task, logits, batch);
  std::optional<Var> mmd;
  for (const auto& ch : channels) {
    Var term = mmd_classification(tape, kernel, ch.target, ch.pmf, ch.z);
    mmd = mmd ? tape.add(*mmd, term) : term;
  }
  return {tape.add(xe, tape.scale(*mmd, objective.lambda)), xe, mmd};
}

}  // namespace calikit
