// Acceptance suite: one PASS/FAIL line per criterion at pinned tolerances.
// Usage: acceptance [id ...]   (no ids: run all). Exit status 1 if any fails.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <string>
#include <vector>

#include "calikit/experiment.hpp"
#include "calikit/mmd.hpp"
#include "calikit/rng.hpp"

using namespace calikit;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path g_work;

std::string run_dir(const std::string& name) { return (g_work / name).string(); }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double variance_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

DiscreteDistribution random_discrete(Rng& rng, std::size_t support, double lo, double hi) {
  DiscreteDistribution d{Array(support, 1), std::vector<double>(support)};
  double s = 0.0;
  for (std::size_t a = 0; a < support; ++a) {
    d.points[a] = rng.uniform(lo, hi);
    s += (d.weights[a] = rng.uniform(0.1, 1.0));
  }
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

// The training setup shared by the regression criteria.
ExperimentConfig heteroscedastic(std::uint64_t seed, double lambda) {
  ExperimentConfig c;
  c.dataset.kind = "synthetic";
  c.dataset.synthetic_name = "heteroscedastic";
  c.dataset.n = 5000;
  c.family = Family::regression;
  c.task.name = TaskName::quantile;
  c.hidden = {64, 64};
  c.lambda = lambda;
  c.batch_size = 64;
  c.samples = 10;
  c.lr = 1e-3;
  c.max_epochs = 60;
  c.patience = 10;
  c.seed = seed;
  return c;
}

struct Trained {
  MetricReport val;
  MetricReport test;
};

Trained train_and_eval(const ExperimentConfig& cfg, const std::string& name) {
  const std::string dir = run_dir(name);
  train(cfg, dir);
  return {cmd_eval(dir, "val"), cmd_eval(dir, "test")};
}

// ---------------------------------------------------------------------------

Outcome moment_closed_form() {
  Rng rng(101);
  double worst = 0.0;
  for (int pair = 0; pair < 10; ++pair) {
    const auto p = random_discrete(rng, 2 + rng.below(6), -2.0, 2.0);
    const auto q = random_discrete(rng, 2 + rng.below(6), -2.0, 2.0);
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t a = 0; a < p.weights.size(); ++a) {
      m1 += p.weights[a] * p.points[a];
      m2 += p.weights[a] * p.points[a] * p.points[a];
    }
    for (std::size_t a = 0; a < q.weights.size(); ++a) {
      m1 -= q.weights[a] * q.points[a];
      m2 -= q.weights[a] * q.points[a] * q.points[a];
    }
    worst = std::max(worst,
                     std::abs(population_mmd_oracle(p, q, KernelSpec::moment()) - (m1 * m1 + m2 * m2)));
  }
  return {worst < 1e-10, fmt("max |err| %.2e over 10 pairs (tol 1e-10)", worst)};
}

Outcome min_kernel_integral() {
  Rng rng(102);
  const double T = 4.0;
  double worst = 0.0;
  for (int pair = 0; pair < 10; ++pair) {
    const auto p = random_discrete(rng, 2 + rng.below(6), 0.0, T);
    const auto q = random_discrete(rng, 2 + rng.below(6), 0.0, T);
    auto cdf = [](const DiscreteDistribution& d, double t) {
      double c = 0.0;
      for (std::size_t a = 0; a < d.weights.size(); ++a)
        if (d.points[a] <= t) c += d.weights[a];
      return c;
    };
    // The squared cdf gap is a step function: integrate it piece by piece.
    std::vector<double> knots{0.0, T};
    for (std::size_t a = 0; a < p.weights.size(); ++a) knots.push_back(p.points[a]);
    for (std::size_t a = 0; a < q.weights.size(); ++a) knots.push_back(q.points[a]);
    std::sort(knots.begin(), knots.end());
    double integral = 0.0;
    for (std::size_t k = 0; k + 1 < knots.size(); ++k) {
      const double gap = cdf(p, 0.5 * (knots[k] + knots[k + 1])) - cdf(q, 0.5 * (knots[k] + knots[k + 1]));
      integral += gap * gap * (knots[k + 1] - knots[k]);
    }
    worst = std::max(worst, std::abs(population_mmd_oracle(p, q, KernelSpec::min(T)) - integral));
  }
  return {worst < 1e-6, fmt("max |err| %.2e over 10 pairs (tol 1e-6)", worst)};
}

Outcome estimator_unbiased() {
  Rng rng(103);
  const std::size_t n = 8, S = 2, reps = 2000, nz = 3, nt = 4;
  std::string detail;
  bool ok = true;
  struct Triple {
    const char* name;
    KernelSpec kernel;
    bool with_z;
    double lo, hi;
  };
  const std::vector<Triple> triples = {
      {"rbf", KernelSpec::rbf(0.8), false, -1.5, 1.5},
      {"tanh", KernelSpec::tanh_threshold(0.3), false, -1.5, 1.5},
      {"moment", KernelSpec::moment(), false, -1.0, 1.0},
      {"min", KernelSpec::min(3.0), false, 0.0, 3.0},
      {"rbf x rbf(z)",
       KernelSpec::product(KernelSpec::rbf(0.8), KernelSpec::rbf(0.6), Slice{0, 1}, Slice{1, 2}),
       true, -1.5, 1.5},
  };
  for (const auto& tr : triples) {
    // P and Q over (t, z) with a shared z marginal; forecasts copy the target's z.
    const std::size_t zn = tr.with_z ? nz : 1;
    std::vector<double> zs(zn), pz(zn, 1.0 / static_cast<double>(zn));
    for (auto& z : zs) z = rng.uniform(-1.0, 1.0);
    std::vector<DiscreteDistribution> pt, qt;
    for (std::size_t z = 0; z < zn; ++z) {
      pt.push_back(random_discrete(rng, nt, tr.lo, tr.hi));
      qt.push_back(random_discrete(rng, nt, tr.lo, tr.hi));
    }
    const std::size_t dim = tr.with_z ? 2 : 1;
    DiscreteDistribution p{Array(zn * nt, dim), {}}, q{Array(zn * nt, dim), {}};
    for (std::size_t z = 0; z < zn; ++z)
      for (std::size_t a = 0; a < nt; ++a) {
        p.points(z * nt + a, 0) = pt[z].points[a];
        q.points(z * nt + a, 0) = qt[z].points[a];
        if (tr.with_z) p.points(z * nt + a, 1) = q.points(z * nt + a, 1) = zs[z];
        p.weights.push_back(pz[z] * pt[z].weights[a]);
        q.weights.push_back(pz[z] * qt[z].weights[a]);
      }
    const double oracle = population_mmd_oracle(p, q, tr.kernel);
    std::vector<double> est(reps);
    for (auto& e : est) {
      Array t(n, dim), f(n * S, dim);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t z = draw_index(rng, pz);
        t(i, 0) = pt[z].points[draw_index(rng, pt[z].weights)];
        if (tr.with_z) t(i, 1) = zs[z];
        for (std::size_t s = 0; s < S; ++s) {
          f(i * S + s, 0) = qt[z].points[draw_index(rng, qt[z].weights)];
          if (tr.with_z) f(i * S + s, 1) = zs[z];
        }
      }
      e = mmd_usq_regression(tr.kernel, t, f, S).value;
    }
    const double se = std::sqrt(variance_of(est) / static_cast<double>(reps));
    const double z = std::abs(mean_of(est) - oracle) / se;
    ok = ok && z < 3.0;
    detail += fmt("%s%s %.2f SE", detail.empty() ? "" : ", ", tr.name, z);
  }
  return {ok, detail + " (tol 3 SE, 2000 estimates each)"};
}

Outcome classification_enumeration() {
  Rng rng(104);
  double worst = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t n = 2 + rng.below(3), m = 2 + rng.below(2);
    const bool with_z = inst % 2 == 1;
    std::vector<std::size_t> y(n);
    Array q(n, m), z(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.below(m);
      double s = 0.0;
      for (std::size_t a = 0; a < m; ++a) s += (q(i, a) = rng.uniform(0.05, 1.0));
      for (std::size_t a = 0; a < m; ++a) q(i, a) /= s;
      z[i] = rng.uniform(-1.0, 1.0);
    }
    const KernelSpec k = with_z ? KernelSpec::product(KernelSpec::delta(), KernelSpec::rbf(0.5),
                                                      Slice{0, 1}, Slice{1, 2})
                                : KernelSpec::delta();
    auto kv = [&](double a, double za, double b, double zb) {
      const double u[] = {a, za}, v[] = {b, zb};
      return with_z ? k.eval(u, v) : k.eval(std::span(u, 1), std::span(v, 1));
    };
    // Expectation of the sampled-label statistic over all m^n assignments.
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
      expect += w * stat / (static_cast<double>(n) * static_cast<double>(n - 1));
    }
    const double got = mmd_usq_classification(k, y, q, with_z ? &z : nullptr).value;
    worst = std::max(worst, std::abs(got - expect));
  }
  return {worst <= 1e-12, fmt("max |err| %.2e over 50 instances (tol 1e-12)", worst)};
}

Outcome loss_gradients() {
  // Central-difference step near the cube root of machine epsilon, where
  // truncation and roundoff error balance; smaller steps lose the near-zero
  // coordinates of a summed batch loss to cancellation.
  const double step = 1e-5;
  double worst_g = 0.0, worst_c = 0.0;
  for (std::uint64_t point = 0; point < 20; ++point) {
    Rng init(mix_seed(105, point));
    const std::size_t n = 10, d = 3;
    Array x(n, d);
    for (std::size_t k = 0; k < x.size(); ++k) x[k] = init.uniform(-1.5, 1.5);

    GaussianForecaster reg(d, {8}, 1e-3, init);
    std::vector<double> y(n);
    for (auto& v : y) v = init.uniform(-2.0, 2.0);
    CalibrationTask quantile;
    const GraphFn fg = [&](Tape& t, std::span<const Var> bound) {
      Rng noise(mix_seed(205, point));  // frozen reparameterisation noise
      return regression_training_loss(t, reg, bound, {x, y, {}}, quantile, KernelSpec::rbf(0.5),
                                      Objective{10.0, 4}, noise)
          .total;
    };
    worst_g = std::max(worst_g, gradcheck(fg, reg.net().params(), step));

    CategoricalForecaster cls(d, {8}, 3, init);
    std::vector<double> labels(n);
    for (auto& v : labels) v = static_cast<double>(init.below(3));
    CalibrationTask canonical;
    canonical.name = TaskName::canonical;
    const std::size_t dz = canonical.z_dim(d, 3);
    const KernelSpec k = KernelSpec::product(KernelSpec::delta(), KernelSpec::rbf(0.4), Slice{0, 1},
                                             Slice{1, 1 + dz});
    const GraphFn fc = [&](Tape& t, std::span<const Var> bound) {
      return classification_training_loss(t, cls, bound, {x, labels, {}}, canonical, k,
                                          Objective{5.0, 1})
          .total;
    };
    worst_c = std::max(worst_c, gradcheck(fc, cls.net().params(), step));
  }
  const double worst = std::max(worst_g, worst_c);
  return {worst < 1e-5,
          fmt("max rel err gaussian %.2e, categorical %.2e at 20 points, step 1e-5 (tol 1e-5)", worst_g, worst_c)};
}

Outcome regularization_improves_qce() {
  std::vector<double> base_qce, base_nll, mmd_qce, mmd_nll;
  std::string picks;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Trained base = train_and_eval(heteroscedastic(seed, 0.0), fmt("c6_s%d_l0", int(seed)));
    base_qce.push_back(base.test.values.at("qce"));
    base_nll.push_back(base.test.values.at("nll"));
    // Lambda chosen by validation QCE.
    double best_val = INFINITY, qce = 0.0, nll = 0.0, pick = 0.0;
    for (double lambda : {1.0, 10.0, 100.0}) {
      const Trained r = train_and_eval(heteroscedastic(seed, lambda),
                                       fmt("c6_s%d_l%g", int(seed), lambda));
      if (r.val.values.at("qce") < best_val) {
        best_val = r.val.values.at("qce");
        qce = r.test.values.at("qce");
        nll = r.test.values.at("nll");
        pick = lambda;
      }
    }
    mmd_qce.push_back(qce);
    mmd_nll.push_back(nll);
    picks += fmt("%s%g", picks.empty() ? "" : ",", pick);
  }
  const double qb = median(base_qce), qm = median(mmd_qce);
  const double nb = median(base_nll), nm = median(mmd_nll);
  const double reduction = 1.0 - qm / qb;
  const double degradation = (nm - nb) / std::abs(nb);
  return {reduction >= 0.30 && degradation < 0.10,
          fmt("median test QCE %.4f -> %.4f (reduction %.0f%%, need >= 30%%); median NLL %.4f -> "
              "%.4f (%+.1f%%, need < 10%%); lambda by seed {%s}",
              qb, qm, 100.0 * reduction, nb, nm, 100.0 * degradation, picks.c_str())};
}

Outcome decision_kernel() {
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ExperimentConfig tanh = heteroscedastic(seed, 10.0);
    tanh.task.name = TaskName::decision;  // threshold c: training label median
    ExperimentConfig rbf = tanh;
    rbf.kernel = nlohmann::json{{"variant", "product"},
                                {"left", {{"variant", "rbf"}, {"bandwidth", "median"}}},
                                {"right", {{"variant", "delta"}}},
                                {"left_slice", {0, 1}},
                                {"right_slice", {1, 2}}};
    const double dt = train_and_eval(tanh, fmt("c7_s%d_tanh", int(seed))).test.values.at("dce");
    const double dr = train_and_eval(rbf, fmt("c7_s%d_rbf", int(seed))).test.values.at("dce");
    wins += dt <= dr;
    detail += fmt("%s%.4f/%.4f", detail.empty() ? "" : " ", dt, dr);
  }
  return {wins >= 4, fmt("tanh <= rbf test DCE in %d of 5 seeds (need >= 4); tanh/rbf: %s", wins,
                         detail.c_str())};
}

Outcome posthoc_complementarity() {
  bool ok = true;
  double worst_margin = INFINITY;
  std::size_t models = 0;
  // Regression models across capacities and training budgets, including
  // deliberately under- and over-fitted ones.
  struct RegCase {
    std::string data;
    std::vector<std::size_t> hidden;
    std::size_t epochs;
    double lr, lambda;
  };
  const std::vector<RegCase> reg = {
      {"heteroscedastic", {16}, 1, 1e-3, 0.0},
      {"heteroscedastic", {64, 64}, 20, 1e-3, 0.0},
      {"heteroscedastic", {32}, 8, 1e-3, 10.0},
      {"heteroscedastic", {128, 128}, 40, 1e-2, 0.0},
      {"geo", {32, 32}, 15, 3e-3, 0.0},
  };
  for (const auto& rc : reg) {
    ExperimentConfig c = heteroscedastic(11 + models, rc.lambda);
    c.dataset.synthetic_name = rc.data;
    c.hidden = rc.hidden;
    c.max_epochs = rc.epochs;
    c.lr = rc.lr;
    c.samples = 4;
    const std::string dir = run_dir(fmt("c8_reg%d", int(models)));
    train(c, dir);
    const RecalSummary s = cmd_recal(dir, "isotonic");
    const double n_val = static_cast<double>(prepare_data(c).val.size());
    const double bound = std::max(0.02, 2.0 / std::sqrt(n_val));
    ok = ok && s.after < bound;
    worst_margin = std::min(worst_margin, bound - s.after);
    ++models;
  }
  // Classification: temperature scaling against T = 1 on validation.
  std::size_t cls_models = 0, acc_kept = 0, xe_ok = 0;
  for (std::size_t classes : {3, 5}) {
    for (double lr : {1e-3, 1e-2}) {
      ExperimentConfig c = heteroscedastic(31 + cls_models, 0.0);
      c.dataset.synthetic_name = "classification";
      c.dataset.classes = classes;
      c.family = Family::classification;
      c.task.name = TaskName::canonical;
      c.hidden = {128, 128};
      c.lr = lr;
      c.max_epochs = 25;
      const std::string dir = run_dir(fmt("c8_cls%d", int(cls_models)));
      train(c, dir);
      const MetricReport before = cmd_eval(dir, "val");
      const RecalSummary s = cmd_recal(dir, "temperature");
      const MetricReport after = cmd_eval(dir, "val");
      acc_kept += after.values.at("accuracy") >= before.values.at("accuracy");
      xe_ok += s.after <= s.before && after.values.at("nll") <= before.values.at("nll");
      ++cls_models;
    }
  }
  ok = ok && acc_kept == cls_models && xe_ok == cls_models;
  return {ok, fmt("isotonic: %d regression models, min margin to bound %.4f; temperature: accuracy "
                  "kept %d/%d, val XE not increased %d/%d",
                  int(models), worst_margin, int(acc_kept), int(cls_models), int(xe_ok),
                  int(cls_models))};
}

Outcome lce_sanity() {
  const std::size_t n = 10000;
  const Dataset d = synth_geo(n, 2024);
  const std::size_t lat = d.feature_index("lat"), lon = d.feature_index("lon");
  const Standardizer st = Standardizer::fit(d.x);
  Array phi(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    phi(i, 0) = d.x(i, lat);
    phi(i, 1) = d.x(i, lon);
  }
  const double scale[2] = {1.0 / st.std[lat], 1.0 / st.std[lon]};
  auto grid_mean = [&](const GaussianForecasts& f) {
    const auto cells = lce_grid(pits(f, d.y), phi, scale, 5, 0.2, 20);
    double s = 0.0;
    std::size_t used = 0;
    for (const auto& c : cells)
      if (c.lce_total) {
        s += *c.lce_total;
        ++used;
      }
    return s / static_cast<double>(used);
  };
  const GaussianForecasts& truth = *d.truth;
  // Location bias: one predictive sd too low in the south, too high in the north.
  GaussianForecasts biased = truth;
  for (std::size_t i = 0; i < n; ++i) biased.mu[i] += truth.sigma[i] * (2.0 * d.x(i, lat) - 1.0);
  const double lt = grid_mean(truth), lb = grid_mean(biased);
  return {lt < 0.005 && lb >= 2.0 * lt,
          fmt("mean grid LCE truth %.5f (need < 0.005), biased %.5f = %.1fx (need >= 2x)", lt, lb,
              lb / lt)};
}

Outcome determinism() {
  ExperimentConfig c = heteroscedastic(3, 10.0);
  c.dataset.n = 2000;
  c.hidden = {32, 32};
  c.samples = 5;
  c.max_epochs = 5;
  bool ok = true;
  std::string detail;
  for (Family fam : {Family::regression, Family::classification}) {
    if (fam == Family::classification) {
      c.family = fam;
      c.dataset.synthetic_name = "classification";
      c.task.name = TaskName::canonical;
    }
    const std::string tag = fam == Family::regression ? "reg" : "cls";
    const std::string a = run_dir("c10_" + tag + "_a"), b = run_dir("c10_" + tag + "_b");
    train(c, a);
    train(c, b);
    cmd_eval(a, "test");
    cmd_eval(b, "test");
    const bool ckpt = slurp(a + "/model.ckpt") == slurp(b + "/model.ckpt") &&
                      !slurp(a + "/model.ckpt").empty();
    const bool metrics = slurp(a + "/metrics_test.json") == slurp(b + "/metrics_test.json");
    ok = ok && ckpt && metrics;
    detail += fmt("%s%s checkpoint %s, metrics %s", detail.empty() ? "" : "; ", tag.c_str(),
                  ckpt ? "identical" : "DIFFER", metrics ? "identical" : "DIFFER");
  }
  return {ok, detail};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "moment-kernel closed form", moment_closed_form},
      {2, "min-kernel cdf-gap integral", min_kernel_integral},
      {3, "unbiased estimator", estimator_unbiased},
      {4, "classification marginalisation", classification_enumeration},
      {5, "loss gradient integrity", loss_gradients},
      {6, "regularisation improves calibration", regularization_improves_qce},
      {7, "decision kernel beats universal kernel", decision_kernel},
      {8, "post-hoc complementarity", posthoc_complementarity},
      {9, "local calibration sanity", lce_sanity},
      {10, "determinism", determinism},
  };
  std::vector<int> wanted;
  for (int k = 1; k < argc; ++k) wanted.push_back(std::stoi(argv[k]));

  g_work = fs::temp_directory_path() / ("calikit_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(g_work);

  int failed = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.id) == wanted.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("%s %2d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  fs::remove_all(g_work);
  return failed ? 1 : 0;
}
