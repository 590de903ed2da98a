#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "calikit/mmd.hpp"
#include "calikit/normal.hpp"
#include "calikit/reference.hpp"

using namespace calikit;

namespace {

Array random_array(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
  Array a(r, c);
  for (std::size_t k = 0; k < a.size(); ++k) a[k] = rng.uniform(lo, hi);
  return a;
}

DiscreteDistribution random_discrete(Rng& rng, std::size_t support, std::size_t dim, double lo,
                                     double hi) {
  DiscreteDistribution d{random_array(rng, support, dim, lo, hi), std::vector<double>(support)};
  double s = 0.0;
  for (auto& w : d.weights) s += (w = rng.uniform(0.1, 1.0));
  for (auto& w : d.weights) w /= s;
  return d;
}

std::size_t draw_index(Rng& rng, const std::vector<double>& w) {
  const double u = rng.uniform();
  double c = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k)
    if (u < (c += w[k])) return k;
  return w.size() - 1;
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / v.size();
}

double variance_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / (v.size() - 1);
}

// Forecast rows (t_hat, z_i) with the target's z repeated per sample.
Array forecast_rows(Rng& rng, const Array& target, std::size_t samples, double spread) {
  Array f(target.rows() * samples, target.cols());
  for (std::size_t i = 0; i < target.rows(); ++i)
    for (std::size_t s = 0; s < samples; ++s) {
      f(i * samples + s, 0) = target(i, 0) + spread * rng.normal();
      for (std::size_t c = 1; c < target.cols(); ++c) f(i * samples + s, c) = target(i, c);
    }
  return f;
}

const KernelSpec kLabelZ =
    KernelSpec::product(KernelSpec::rbf(0.7), KernelSpec::rbf(1.3), Slice{0, 1}, Slice{1, 3});

}  // namespace

TEST(MmdRegression, IdenticalSamplesGiveZero) {
  Rng rng(51);
  const Array t = random_array(rng, 9, 3);
  for (const auto& k : {kLabelZ, KernelSpec::rbf(0.5), KernelSpec::linear()})
    EXPECT_EQ(mmd_usq_regression(k, t, t, 1).value, 0.0) << k.describe();
}

TEST(MmdRegression, HandExample) {
  const Array t = Array::of(2, 1, {0, 1}), f = Array::of(2, 1, {1, 0});
  const auto est = mmd_usq_regression(KernelSpec::linear(), t, f, 1);
  EXPECT_DOUBLE_EQ(est.value, -1.0);
  EXPECT_DOUBLE_EQ(reference::mmd_usq_regression(KernelSpec::linear(), t, f, 1), -1.0);
  EXPECT_EQ(est.n, 2u);
  EXPECT_EQ(est.samples, 1u);
}

TEST(MmdRegression, Errors) {
  const Array one(1, 1), two(2, 1);
  EXPECT_THROW(mmd_usq_regression(KernelSpec::rbf(1.0), one, one, 1), std::invalid_argument);
  EXPECT_THROW(mmd_usq_regression(KernelSpec::rbf_median(), two, two, 1), std::logic_error);
}

TEST(MmdRegression, MatchesSerialReference) {
  Rng rng(52);
  const Array t = random_array(rng, 17, 3);
  const std::size_t S = 4;
  const Array shared = forecast_rows(rng, t, S, 0.5);
  Array free_z = shared;
  for (std::size_t r = 0; r < free_z.rows(); ++r) free_z(r, 2) += 0.1 * rng.normal();
  const std::vector<KernelSpec> kernels = {
      kLabelZ,
      KernelSpec::product(KernelSpec::tanh_threshold(0.2), KernelSpec::delta(), Slice{0, 1},
                          Slice{1, 3}),
      KernelSpec::rbf(0.9),
      KernelSpec::scaled(2.0, kLabelZ),
  };
  for (const auto& k : kernels) {
    for (const Array* f : {&shared, static_cast<const Array*>(&free_z)}) {
      const double a = mmd_usq_regression(k, t, *f, S).value;
      const double b = reference::mmd_usq_regression(k, t, *f, S);
      EXPECT_NEAR(a, b, 1e-12 * (1.0 + std::abs(b))) << k.describe();
    }
  }
  const Array t1 = random_array(rng, 11, 1);
  const Array f1 = forecast_rows(rng, t1, 3, 0.4);
  for (const auto& k : {KernelSpec::rbf(0.4), KernelSpec::moment(), KernelSpec::tanh_threshold(0.1)})
    EXPECT_NEAR(mmd_usq_regression(k, t1, f1, 3).value, reference::mmd_usq_regression(k, t1, f1, 3),
                1e-12);
}

TEST(MmdRegression, PermutationInvariant) {
  Rng rng(53);
  const std::size_t n = 12, S = 3;
  const Array t = random_array(rng, n, 3);
  const Array f = forecast_rows(rng, t, S, 0.3);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  std::vector<std::size_t> frows;
  for (std::size_t i : perm)
    for (std::size_t s = 0; s < S; ++s) frows.push_back(i * S + s);
  const double a = mmd_usq_regression(kLabelZ, t, f, S).value;
  const double b = mmd_usq_regression(kLabelZ, take_rows(t, perm), take_rows(f, frows), S).value;
  EXPECT_NEAR(a, b, 1e-14);
}

TEST(MmdRegression, NegativeValuesAreNotClamped) {
  Rng rng(54);
  bool seen_negative = false;
  for (int trial = 0; trial < 200 && !seen_negative; ++trial) {
    const Array t = random_array(rng, 6, 1);
    const Array f = forecast_rows(rng, t, 1, 0.0);
    Array g = f;
    for (std::size_t r = 0; r < g.rows(); ++r) g[r] = rng.uniform(-1.0, 1.0);
    seen_negative = mmd_usq_regression(KernelSpec::rbf(0.5), t, g, 1).value < 0.0;
  }
  EXPECT_TRUE(seen_negative);
}

TEST(MmdRegression, UnbiasedAgainstPopulationOracle) {
  // Targets (t, z) ~ P; forecasts share z and draw t_hat ~ Q(. | z).
  Rng rng(55);
  for (int triple = 0; triple < 3; ++triple) {
    const std::size_t nz = 3, nt = 4;
    Array zs = random_array(rng, nz, 1, -1.0, 1.0);
    std::vector<double> pz(nz, 1.0 / nz);
    std::vector<DiscreteDistribution> pt, qt;
    for (std::size_t z = 0; z < nz; ++z) {
      pt.push_back(random_discrete(rng, nt, 1, -1.5, 1.5));
      qt.push_back(random_discrete(rng, nt, 1, -1.0, 2.0));
    }
    DiscreteDistribution p{Array(nz * nt, 2), {}}, q{Array(nz * nt, 2), {}};
    for (std::size_t z = 0; z < nz; ++z)
      for (std::size_t a = 0; a < nt; ++a) {
        p.points(z * nt + a, 0) = pt[z].points[a];
        q.points(z * nt + a, 0) = qt[z].points[a];
        p.points(z * nt + a, 1) = q.points(z * nt + a, 1) = zs[z];
        p.weights.push_back(pz[z] * pt[z].weights[a]);
        q.weights.push_back(pz[z] * qt[z].weights[a]);
      }
    const KernelSpec k =
        KernelSpec::product(KernelSpec::rbf(0.8), KernelSpec::rbf(0.6), Slice{0, 1}, Slice{1, 2});
    const double oracle = population_mmd_oracle(p, q, k);

    const std::size_t n = 8, S = 2, reps = 2000;
    std::vector<double> est(reps);
    for (std::size_t r = 0; r < reps; ++r) {
      Array t(n, 2), f(n * S, 2);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t z = draw_index(rng, pz);
        t(i, 0) = pt[z].points[draw_index(rng, pt[z].weights)];
        t(i, 1) = zs[z];
        for (std::size_t s = 0; s < S; ++s) {
          f(i * S + s, 0) = qt[z].points[draw_index(rng, qt[z].weights)];
          f(i * S + s, 1) = zs[z];
        }
      }
      est[r] = mmd_usq_regression(k, t, f, S).value;
    }
    const double se = std::sqrt(variance_of(est) / reps);
    EXPECT_LT(std::abs(mean_of(est) - oracle), 3.0 * se) << "triple " << triple;
  }
}

TEST(MmdRegression, MoreSamplesNeverIncreaseVariance) {
  Rng rng(56);
  const std::size_t n = 16;
  const Array t = random_array(rng, n, 1, -2.0, 2.0);
  const std::vector<double> mu(n, 0.3), sigma(n, 1.2);
  double prev = INFINITY;
  for (std::size_t S : {1, 5, 25}) {
    std::vector<double> est(200);
    for (auto& e : est) {
      Array f(n * S, 1);
      for (std::size_t r = 0; r < f.rows(); ++r) f[r] = mu[r / S] + sigma[r / S] * rng.normal();
      e = mmd_usq_regression(KernelSpec::rbf(1.0), t, f, S).value;
    }
    const double v = variance_of(est);
    EXPECT_LT(v, prev) << "S = " << S;
    prev = v;
  }
}

TEST(MmdRegression, GradientMatchesFiniteDifferences) {
  // Both the factored path (z shared by forecast rows) and the generic path,
  // for an rbf and a tanh_threshold label factor.
  Rng rng(57);
  const std::size_t n = 7, S = 3;
  const Array t = random_array(rng, n, 3);
  const Array shared = forecast_rows(rng, t, S, 0.5);
  Array free_z = shared;
  for (std::size_t r = 0; r < free_z.rows(); ++r) free_z(r, 1) += 0.2 * rng.normal();
  const KernelSpec tanh_z = KernelSpec::product(KernelSpec::tanh_threshold(0.1),
                                                KernelSpec::rbf(1.3), Slice{0, 1}, Slice{1, 3});
  for (const KernelSpec& k : {kLabelZ, tanh_z}) {
    for (const Array* f0 : {&shared, static_cast<const Array*>(&free_z)}) {
      RegressionMmdGrad g;
      mmd_usq_regression(k, t, *f0, S, &g);
      const double h = 1e-6;
      auto fd = [&](Array tp, Array fp, Array tm, Array fm) {
        return (reference::mmd_usq_regression(k, tp, fp, S) -
                reference::mmd_usq_regression(k, tm, fm, S)) /
               (2 * h);
      };
      for (std::size_t i = 0; i < n; ++i) {
        Array tp = t, tm = t;
        tp(i, 0) += h;
        tm(i, 0) -= h;
        EXPECT_NEAR(g.d_target(i, 0), fd(tp, *f0, tm, *f0), 1e-7);
        for (std::size_t s = 0; s < S; ++s) {
          Array fp = *f0, fm = *f0;
          fp(i * S + s, 0) += h;
          fm(i * S + s, 0) -= h;
          EXPECT_NEAR(g.d_forecast(i * S + s, 0), fd(t, fp, t, fm), 1e-7);
        }
        // z moves together in the target row and its forecast rows.
        for (std::size_t c = 1; c < 3; ++c) {
          Array tzp = t, tzm = t, fzp = *f0, fzm = *f0;
          tzp(i, c) += h;
          tzm(i, c) -= h;
          double total = g.d_target(i, c);
          for (std::size_t s = 0; s < S; ++s) {
            fzp(i * S + s, c) += h;
            fzm(i * S + s, c) -= h;
            total += g.d_forecast(i * S + s, c);
          }
          EXPECT_NEAR(total, fd(tzp, fzp, tzm, fzm), 1e-7);
        }
      }
    }
  }
}

TEST(MmdClassification, OneHotAtTruthGivesZero) {
  const std::vector<std::size_t> y{0, 2, 1, 1};
  Array q(4, 3);
  for (std::size_t i = 0; i < 4; ++i) q(i, y[i]) = 1.0;
  EXPECT_EQ(mmd_usq_classification(KernelSpec::delta(), y, q, nullptr).value, 0.0);
}

TEST(MmdClassification, HandExample) {
  const std::vector<std::size_t> y{0, 0};
  const Array q = Array::of(2, 2, {0.5, 0.5, 0.5, 0.5});
  EXPECT_DOUBLE_EQ(mmd_usq_classification(KernelSpec::delta(), y, q, nullptr).value, 0.5);
  EXPECT_DOUBLE_EQ(reference::mmd_usq_classification(KernelSpec::delta(), y, q, nullptr), 0.5);
}

TEST(MmdClassification, Errors) {
  const std::vector<std::size_t> y1{0}, y2{0, 3};
  EXPECT_THROW(mmd_usq_classification(KernelSpec::delta(), y1, Array(1, 2, 0.5), nullptr),
               std::invalid_argument);
  EXPECT_THROW(mmd_usq_classification(KernelSpec::delta(), y2, Array(2, 2, 0.5), nullptr),
               std::invalid_argument);
  const std::vector<std::size_t> y{0, 1};
  EXPECT_THROW(mmd_usq_classification(KernelSpec::delta(), y, Array::of(2, 2, {0.9, 0.3, 0.5, 0.5}),
                                      nullptr),
               std::invalid_argument);
}

TEST(MmdClassification, EqualsEnumerationOverSampledLabels) {
  Rng rng(58);
  for (int inst = 0; inst < 30; ++inst) {
    const std::size_t n = 2 + rng.below(3), m = 2 + rng.below(2);
    std::vector<std::size_t> y(n);
    Array q(n, m), z(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.below(m);
      double s = 0.0;
      for (std::size_t a = 0; a < m; ++a) s += (q(i, a) = rng.uniform(0.05, 1.0));
      for (std::size_t a = 0; a < m; ++a) q(i, a) /= s;
      z[i] = rng.uniform(-1.0, 1.0);
    }
    const KernelSpec k =
        KernelSpec::product(KernelSpec::delta(), KernelSpec::rbf(0.5), Slice{0, 1}, Slice{1, 2});
    auto kv = [&](double a, double za, double b, double zb) {
      const double u[] = {a, za}, v[] = {b, zb};
      return k.eval(u, v);
    };
    // Expected S = 1 statistic over all m^n sampled label assignments.
    std::size_t total = 1;
    for (std::size_t i = 0; i < n; ++i) total *= m;
    double expect = 0.0;
    std::vector<std::size_t> yh(n);
    for (std::size_t code = 0; code < total; ++code) {
      double w = 1.0;
      for (std::size_t i = 0, c = code; i < n; ++i, c /= m) w *= q(i, yh[i] = c % m);
      double stat = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          if (i != j)
            stat += kv(y[i], z[i], y[j], z[j]) + kv(yh[i], z[i], yh[j], z[j]) -
                    kv(y[i], z[i], yh[j], z[j]) - kv(y[j], z[j], yh[i], z[i]);
      expect += w * stat / (n * (n - 1.0));
    }
    EXPECT_NEAR(mmd_usq_classification(k, y, q, &z).value, expect, 1e-12);
  }
}

TEST(MmdClassification, GradientMatchesFiniteDifferences) {
  Rng rng(59);
  const std::size_t n = 5, m = 3;
  std::vector<std::size_t> y(n);
  Array q(n, m), z(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = rng.below(m);
    double s = 0.0;
    for (std::size_t a = 0; a < m; ++a) s += (q(i, a) = rng.uniform(0.1, 0.5));
    for (std::size_t a = 0; a < m; ++a) z(i, a) = (q(i, a) /= s);
  }
  const KernelSpec k =
      KernelSpec::product(KernelSpec::delta(), KernelSpec::rbf(0.4), Slice{0, 1}, Slice{1, 4});
  ClassificationMmdGrad g;
  mmd_usq_classification(k, y, q, &z, &g);
  // Coordinate-wise perturbations leave the simplex; the reference estimator
  // does not validate pmfs, and the estimator is a polynomial in q.
  const double h = 1e-6;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) {
      Array qp = q, qm = q, zp = z, zm = z;
      qp(r, c) += h;
      qm(r, c) -= h;
      zp(r, c) += h;
      zm(r, c) -= h;
      EXPECT_NEAR(g.d_pmf(r, c),
                  (reference::mmd_usq_classification(k, y, qp, &z) -
                   reference::mmd_usq_classification(k, y, qm, &z)) / (2 * h),
                  1e-7);
      EXPECT_NEAR(g.d_z(r, c),
                  (reference::mmd_usq_classification(k, y, q, &zp) -
                   reference::mmd_usq_classification(k, y, q, &zm)) / (2 * h),
                  1e-7);
    }
}

TEST(MmdClassification, MatchesSerialReference) {
  Rng rng(60);
  const std::size_t n = 20, m = 4;
  std::vector<std::size_t> y(n);
  Array q(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = rng.below(m);
    double s = 0.0;
    for (std::size_t a = 0; a < m; ++a) s += (q(i, a) = rng.uniform(0.01, 1.0));
    for (std::size_t a = 0; a < m; ++a) q(i, a) /= s;
  }
  const KernelSpec k =
      KernelSpec::product(KernelSpec::delta(), KernelSpec::rbf(0.3), Slice{0, 1}, Slice{1, 1 + m});
  EXPECT_NEAR(mmd_usq_classification(k, y, q, &q).value, reference::mmd_usq_classification(k, y, q, &q),
              1e-13);
}

TEST(PopulationOracle, Examples) {
  const DiscreteDistribution d1{Array::of(1, 1, {1}), {1.0}}, d0{Array::of(1, 1, {0}), {1.0}},
      d2{Array::of(1, 1, {2}), {1.0}};
  EXPECT_DOUBLE_EQ(population_mmd_oracle(d1, d0, KernelSpec::moment()), 2.0);
  EXPECT_DOUBLE_EQ(population_mmd_oracle(d1, d2, KernelSpec::min(3.0)), 1.0);
  Rng rng(61);
  const auto p = random_discrete(rng, 5, 2, -1.0, 1.0);
  EXPECT_NEAR(population_mmd_oracle(p, p, KernelSpec::rbf(0.5)), 0.0, 1e-15);
}

TEST(PopulationOracle, MomentKernelClosedForm) {
  Rng rng(62);
  for (int pair = 0; pair < 10; ++pair) {
    const auto p = random_discrete(rng, 6, 1, -2.0, 2.0), q = random_discrete(rng, 4, 1, -2.0, 2.0);
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t a = 0; a < 6; ++a) {
      m1 += p.weights[a] * p.points[a];
      m2 += p.weights[a] * p.points[a] * p.points[a];
    }
    for (std::size_t a = 0; a < 4; ++a) {
      m1 -= q.weights[a] * q.points[a];
      m2 -= q.weights[a] * q.points[a] * q.points[a];
    }
    EXPECT_NEAR(population_mmd_oracle(p, q, KernelSpec::moment()), m1 * m1 + m2 * m2, 1e-10);
  }
}

TEST(PopulationOracle, MinKernelIsSquaredCdfGapIntegral) {
  Rng rng(63);
  const double T = 3.0;
  for (int pair = 0; pair < 10; ++pair) {
    const auto p = random_discrete(rng, 5, 1, 0.0, T), q = random_discrete(rng, 3, 1, 0.0, T);
    auto cdf = [](const DiscreteDistribution& d, double t) {
      double c = 0.0;
      for (std::size_t a = 0; a < d.weights.size(); ++a)
        if (d.points[a] <= t) c += d.weights[a];
      return c;
    };
    // The integrand is piecewise constant between support points: integrate exactly.
    std::vector<double> knots{0.0, T};
    for (std::size_t a = 0; a < 5; ++a) knots.push_back(p.points[a]);
    for (std::size_t a = 0; a < 3; ++a) knots.push_back(q.points[a]);
    std::sort(knots.begin(), knots.end());
    double integral = 0.0;
    for (std::size_t k = 0; k + 1 < knots.size(); ++k) {
      const double mid = 0.5 * (knots[k] + knots[k + 1]);
      const double gap = cdf(p, mid) - cdf(q, mid);
      integral += gap * gap * (knots[k + 1] - knots[k]);
    }
    EXPECT_NEAR(population_mmd_oracle(p, q, KernelSpec::min(T)), integral, 1e-10);
  }
}

TEST(PopulationOracle, NonNegative) {
  Rng rng(64);
  for (int pair = 0; pair < 50; ++pair) {
    const auto p = random_discrete(rng, 4, 2, -1.0, 1.0), q = random_discrete(rng, 4, 2, -1.0, 1.0);
    EXPECT_GE(population_mmd_oracle(p, q, KernelSpec::rbf(0.7)), -1e-12);
  }
}

namespace {

struct LossFixture {
  Rng init{70};
  GaussianForecaster model{3, {6}, 1e-3, init};
  Array x = random_array(init, 9, 3);
  std::vector<double> y = [this] {
    std::vector<double> v(9);
    for (auto& e : v) e = init.uniform(-2.0, 2.0);
    return v;
  }();
  std::vector<int> groups = std::vector<int>{0, 1, 0, 1, 1, 0, 0, 1, 1};
  BatchView batch() const { return {x, y, groups}; }
};

double loss_value(const LossFixture& f, const CalibrationTask& task, const KernelSpec& k,
                  double lambda, double* proper = nullptr) {
  Tape t;
  auto bound = f.model.net().bind(t);
  Rng rng(99);
  const auto loss = regression_training_loss(t, f.model, bound, f.batch(), task, k,
                                             Objective{lambda, 4}, rng);
  if (proper) *proper = t.value(loss.proper).item();
  return t.value(loss.total).item();
}

}  // namespace

TEST(TrainingLoss, LambdaZeroIsPlainNll) {
  LossFixture f;
  CalibrationTask task;
  double proper = 0.0;
  const double total = loss_value(f, task, KernelSpec::rbf(0.3), 0.0, &proper);
  EXPECT_EQ(total, proper);
  const GaussianForecasts p = f.model.predict(f.x);
  double nll = 0.0;
  for (std::size_t i = 0; i < 9; ++i) nll += gaussian_nll(p.mu[i], p.sigma[i], f.y[i]);
  EXPECT_NEAR(total, nll, 1e-10);
}

TEST(TrainingLoss, LinearInLambda) {
  LossFixture f;
  CalibrationTask task;
  double proper = 0.0;
  const double l1 = loss_value(f, task, KernelSpec::rbf(0.3), 1.5, &proper);
  const double l2 = loss_value(f, task, KernelSpec::rbf(0.3), 3.0);
  EXPECT_EQ(l2 - proper, 2.0 * (l1 - proper));
}

TEST(TrainingLoss, RegressionGradcheckWithFrozenNoise) {
  LossFixture f;
  struct Case {
    CalibrationTask task;
    KernelSpec kernel;
  };
  CalibrationTask quantile, distribution, individual, group;
  distribution.name = TaskName::distribution;
  individual.name = TaskName::individual;
  group.name = TaskName::group;
  group.group_column = "g";
  const std::vector<Case> cases = {
      {quantile, KernelSpec::rbf(0.3)},
      {distribution, KernelSpec::product(KernelSpec::rbf(0.5), KernelSpec::rbf(1.0), Slice{0, 1},
                                         Slice{1, 3})},
      {individual, KernelSpec::product(KernelSpec::rbf(0.5), KernelSpec::rbf(1.0), Slice{0, 1},
                                       Slice{1, 4})},
      {group, KernelSpec::product(KernelSpec::rbf(0.5), KernelSpec::delta(), Slice{0, 1}, Slice{1, 2})},
  };
  for (const auto& c : cases) {
    const GraphFn fn = [&](Tape& t, std::span<const Var> bound) {
      Rng rng(7);
      return regression_training_loss(t, f.model, bound, f.batch(), c.task, c.kernel,
                                      Objective{10.0, 3}, rng)
          .total;
    };
    EXPECT_LT(gradcheck(fn, f.model.net().params()), 1e-5) << to_string(c.task.name);
  }
}

TEST(TrainingLoss, ClassificationGradcheck) {
  Rng init(71);
  CategoricalForecaster model(3, {6}, 3, init);
  // Distinct output biases keep rows with all hidden units off away from an
  // exact top-label tie, where the top-label loss is discontinuous.
  for (std::size_t k = 0; k < 3; ++k) model.net().params().back()[k] = 0.3 * k - 0.2;
  const Array x = random_array(init, 8, 3);
  const std::vector<double> y{0, 1, 2, 2, 1, 0, 0, 1};
  for (TaskName name : {TaskName::canonical, TaskName::toplabel, TaskName::marginal_cls}) {
    CalibrationTask task;
    task.name = name;
    const std::size_t dz = task.z_dim(3, 3);
    const KernelSpec k = KernelSpec::product(KernelSpec::delta(), KernelSpec::rbf(0.4), Slice{0, 1},
                                             Slice{1, 1 + dz});
    const GraphFn fn = [&](Tape& t, std::span<const Var> bound) {
      return classification_training_loss(t, model, bound, {x, y, {}}, task, k, Objective{5.0, 1})
          .total;
    };
    EXPECT_LT(gradcheck(fn, model.net().params()), 1e-5) << to_string(name);
  }
}

TEST(TrainingLoss, MarginalChannelsSum) {
  Rng init(72);
  const CategoricalForecaster model(2, {4}, 3, init);
  const Array x = random_array(init, 6, 2);
  const std::vector<double> y{0, 1, 2, 2, 1, 0};
  CalibrationTask task;
  task.name = TaskName::marginal_cls;
  const KernelSpec k =
      KernelSpec::product(KernelSpec::delta(), KernelSpec::rbf(0.4), Slice{0, 1}, Slice{1, 2});
  Tape t;
  auto bound = model.net().bind(t);
  const auto loss = classification_training_loss(t, model, bound, {x, y, {}}, task, k, Objective{1.0, 1});
  const Array q = model.predict(x);
  double expect = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<std::size_t> hit(6);
    Array pmf(6, 2), z(6, 1);
    for (std::size_t i = 0; i < 6; ++i) {
      hit[i] = y[i] == c;
      pmf(i, 1) = z[i] = q(i, c);
      pmf(i, 0) = 1.0 - q(i, c);
    }
    expect += mmd_usq_classification(k, hit, pmf, &z).value;
  }
  EXPECT_NEAR(t.value(*loss.mmd).item(), expect, 1e-12);
}
