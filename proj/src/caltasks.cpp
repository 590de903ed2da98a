#include "calikit/caltasks.hpp"

#include <cmath>
#include <stdexcept>

#include "calikit/normal.hpp"

namespace calikit {

using nlohmann::json;

namespace {

struct TaskNameEntry {
  TaskName name;
  const char* text;
};

constexpr TaskNameEntry kTaskNames[] = {
    {TaskName::quantile, "quantile"},         {TaskName::threshold, "threshold"},
    {TaskName::marginal, "marginal"},         {TaskName::decision, "decision"},
    {TaskName::group, "group"},               {TaskName::distribution, "distribution"},
    {TaskName::individual, "individual"},     {TaskName::local, "local"},
    {TaskName::canonical, "canonical"},       {TaskName::toplabel, "toplabel"},
    {TaskName::marginal_cls, "marginal_cls"},
};

Array column_of(std::span<const double> v) { return Array::column(v); }

}  // namespace

std::string to_string(Family f) {
  return f == Family::regression ? "regression" : "classification";
}

Family family_from_string(const std::string& s) {
  if (s == "regression") return Family::regression;
  if (s == "classification") return Family::classification;
  throw std::invalid_argument("unknown task family \"" + s + "\"");
}

std::string to_string(TaskName t) {
  for (const auto& e : kTaskNames)
    if (e.name == t) return e.text;
  return "?";
}

TaskName task_from_string(const std::string& s) {
  for (const auto& e : kTaskNames)
    if (s == e.text) return e.name;
  throw std::invalid_argument("unknown calibration task \"" + s + "\"");
}

Family CalibrationTask::family() const {
  switch (name) {
    case TaskName::canonical:
    case TaskName::toplabel:
    case TaskName::marginal_cls:
      return Family::classification;
    default:
      return Family::regression;
  }
}

LabelTransform CalibrationTask::transform() const {
  return (name == TaskName::quantile || name == TaskName::threshold) ? LabelTransform::pit
                                                                     : LabelTransform::identity;
}

std::size_t CalibrationTask::z_dim(std::size_t input_dim, std::size_t classes) const {
  switch (name) {
    case TaskName::quantile:
    case TaskName::marginal:
      return 0;
    case TaskName::threshold:
    case TaskName::decision:
    case TaskName::group:
    case TaskName::toplabel:
    case TaskName::marginal_cls:
      return 1;
    case TaskName::distribution:
      return 2;
    case TaskName::individual:
      return input_dim;
    case TaskName::local:
      return features.size();
    case TaskName::canonical:
      return classes;
  }
  return 0;
}

json CalibrationTask::to_json() const {
  json j;
  j["name"] = to_string(name);
  switch (name) {
    case TaskName::threshold:
      j["y0"] = std::isnan(y0) ? json("median") : json(y0);
      j["alpha"] = alpha;
      break;
    case TaskName::decision:
      j["c"] = std::isnan(c) ? json("median") : json(c);
      break;
    case TaskName::group:
      j["group_column"] = group_column;
      break;
    case TaskName::local:
      j["features"] = features;
      break;
    default:
      break;
  }
  if (kernel) j["kernel"] = kernel->to_json();
  return j;
}

CalibrationTask CalibrationTask::from_json(const json& j) {
  if (!j.is_object() || !j.contains("name") || !j["name"].is_string()) {
    throw std::invalid_argument("calibration_task.name: expected a task name string");
  }
  CalibrationTask t;
  t.name = task_from_string(j["name"]);
  auto real_or_median = [&](const char* key, double& out) {
    if (!j.contains(key) || j[key].is_null() || j[key] == "median") return;
    if (!j[key].is_number()) {
      throw std::invalid_argument(std::string("calibration_task.") + key +
                                  ": expected a number or \"median\"");
    }
    out = j[key].get<double>();
  };
  real_or_median("y0", t.y0);
  real_or_median("c", t.c);
  if (j.contains("alpha")) {
    if (!j["alpha"].is_number()) throw std::invalid_argument("calibration_task.alpha: expected a number");
    t.alpha = j["alpha"].get<double>();
    if (!(t.alpha > 0.0 && t.alpha < 1.0)) {
      throw std::invalid_argument("calibration_task.alpha: must lie in (0, 1)");
    }
  }
  if (j.contains("group_column")) t.group_column = j["group_column"].get<std::string>();
  if (j.contains("features")) t.features = j["features"].get<std::vector<std::size_t>>();
  if (t.name == TaskName::local && t.features.empty()) {
    throw std::invalid_argument("calibration_task.features: local calibration needs phi(x) features");
  }
  if (j.contains("kernel") && !j["kernel"].is_null()) t.kernel = KernelSpec::from_json(j["kernel"]);
  return t;
}

std::size_t argmax_lowest(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < row.size(); ++k)
    if (row[k] > row[best]) best = k;
  return best;
}

RegressionPairs build_regression_pairs(Tape& tape, const CalibrationTask& task,
                                       const GaussianForecaster::Outputs& forecast,
                                       const BatchView& batch, std::size_t samples, Rng& rng) {
  if (task.family() != Family::regression) {
    throw std::invalid_argument("calibration task " + to_string(task.name) +
                                " needs a classification forecaster");
  }
  if (samples == 0) throw std::invalid_argument("samples_per_forecast must be at least 1");
  // Copies: the tape grows below, which may move node storage.
  const Array mu = tape.value(forecast.mu);
  const Array sigma = tape.value(forecast.sigma);
  const std::size_t n = mu.rows();
  if (batch.y.size() != n || batch.x.rows() != n) {
    throw ShapeError("build_pairs: batch has " + std::to_string(batch.y.size()) + " labels and " +
                     std::to_string(batch.x.rows()) + " rows for " + std::to_string(n) +
                     " forecasts");
  }

  RegressionPairs pairs;
  pairs.n = n;
  pairs.samples = samples;
  pairs.uniforms = Array(n * samples, 1);
  Array eps(n * samples, 1);
  for (std::size_t r = 0; r < n * samples; ++r) {
    pairs.uniforms[r] = rng.uniform_open();
    eps[r] = normal_icdf(pairs.uniforms[r]);
  }
  Var y = tape.constant(column_of(batch.y), "y");
  Var y_hat = reparam_sample(tape, forecast.mu, forecast.sigma, eps);

  Var t = y;
  Var t_hat = y_hat;
  if (task.transform() == LabelTransform::pit) {
    t = tape.normal_cdf(tape.div(tape.sub(y, forecast.mu), forecast.sigma));
    Var mu_rep = tape.repeat_rows(forecast.mu, samples);
    Var sigma_rep = tape.repeat_rows(forecast.sigma, samples);
    t_hat = tape.normal_cdf(tape.div(tape.sub(y_hat, mu_rep), sigma_rep));
  }

  std::optional<Var> z;
  switch (task.name) {
    case TaskName::quantile:
    case TaskName::marginal:
      break;
    case TaskName::threshold: {
      if (std::isnan(task.y0)) throw std::invalid_argument("threshold task: y0 not resolved");
      Array zv(n, 1);
      for (std::size_t i = 0; i < n; ++i)
        zv[i] = gaussian_cdf(mu[i], sigma[i], task.y0) <= task.alpha ? 1.0 : 0.0;
      z = tape.constant(std::move(zv), "z_threshold");
      break;
    }
    case TaskName::decision: {
      if (std::isnan(task.c)) throw std::invalid_argument("decision task: c not resolved");
      Array zv(n, 1);
      for (std::size_t i = 0; i < n; ++i)
        zv[i] = 1.0 - gaussian_cdf(mu[i], sigma[i], task.c) >= 0.5 ? 1.0 : -1.0;
      z = tape.constant(std::move(zv), "z_action");
      break;
    }
    case TaskName::group: {
      if (batch.groups.size() != n) {
        throw std::invalid_argument("group task: group column \"" + task.group_column +
                                    "\" missing from the dataset");
      }
      Array zv(n, 1);
      for (std::size_t i = 0; i < n; ++i) zv[i] = batch.groups[i];
      z = tape.constant(std::move(zv), "z_group");
      break;
    }
    case TaskName::distribution: {
      const Var parts[] = {forecast.mu, tape.log(forecast.sigma)};
      z = tape.concat_cols(parts);
      break;
    }
    case TaskName::individual:
      z = tape.constant(batch.x, "z_x");
      break;
    case TaskName::local: {
      Array zv(n, task.features.size());
      for (std::size_t k = 0; k < task.features.size(); ++k) {
        if (task.features[k] >= batch.x.cols()) {
          throw std::invalid_argument("local task: feature index " +
                                      std::to_string(task.features[k]) + " out of range");
        }
        for (std::size_t i = 0; i < n; ++i) zv(i, k) = batch.x(i, task.features[k]);
      }
      z = tape.constant(std::move(zv), "z_phi");
      break;
    }
    default:
      break;
  }

  if (z) {
    pairs.z_dim = tape.value(*z).cols();
    const Var target_parts[] = {t, *z};
    const Var forecast_parts[] = {t_hat, tape.repeat_rows(*z, samples)};
    pairs.target = tape.concat_cols(target_parts);
    pairs.forecast = tape.concat_cols(forecast_parts);
  } else {
    pairs.target = t;
    pairs.forecast = t_hat;
  }
  return pairs;
}

std::vector<ClassificationChannel> build_classification_pairs(Tape& tape,
                                                              const CalibrationTask& task,
                                                              Var logits, const BatchView& batch) {
  if (task.family() != Family::classification) {
    throw std::invalid_argument("calibration task " + to_string(task.name) +
                                " needs a regression forecaster");
  }
  const std::size_t n = tape.value(logits).rows();
  const std::size_t m = tape.value(logits).cols();
  if (batch.y.size() != n) throw ShapeError("build_pairs: label count does not match logits");
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double y = batch.y[i];
    if (!(y >= 0.0) || y >= static_cast<double>(m) || y != std::floor(y)) {
      throw std::invalid_argument("build_pairs: label " + std::to_string(y) +
                                  " is not a class index below " + std::to_string(m));
    }
    labels[i] = static_cast<std::size_t>(y);
  }

  Var q = tape.softmax(logits);
  std::vector<ClassificationChannel> channels;

  // Bernoulli pmf (1 - p, p) over the indicator outcome.
  auto indicator_pmf = [&](Var p) {
    const Var parts[] = {tape.add_scalar(tape.scale(p, -1.0), 1.0), p};
    return tape.concat_cols(parts);
  };

  switch (task.name) {
    case TaskName::canonical:
      channels.push_back({labels, q, q, m});
      break;
    case TaskName::toplabel: {
      const Array& qv = tape.value(q);
      std::vector<std::size_t> top(n), hit(n);
      for (std::size_t i = 0; i < n; ++i) {
        top[i] = argmax_lowest(qv.row_span(i));
        hit[i] = labels[i] == top[i] ? 1 : 0;
      }
      Var q_top = tape.pick(q, top);
      channels.push_back({hit, indicator_pmf(q_top), q_top, 2});
      break;
    }
    case TaskName::marginal_cls: {
      for (std::size_t k = 0; k < m; ++k) {
        std::vector<std::size_t> hit(n), col(n, k);
        for (std::size_t i = 0; i < n; ++i) hit[i] = labels[i] == k ? 1 : 0;
        Var q_k = tape.pick(q, col);
        channels.push_back({hit, indicator_pmf(q_k), q_k, 2});
      }
      break;
    }
    default:
      break;
  }
  return channels;
}

KernelSpec default_kernel(const CalibrationTask& task, std::size_t z_dim) {
  const Slice label{0, 1};
  const Slice zs{1, 1 + z_dim};
  switch (task.name) {
    case TaskName::quantile:
    case TaskName::marginal:
      return KernelSpec::rbf_median();
    case TaskName::threshold:
    case TaskName::group:
      return KernelSpec::product(KernelSpec::rbf_median(), KernelSpec::delta(), label, zs);
    case TaskName::decision: {
      if (std::isnan(task.c)) throw std::invalid_argument("decision task: c not resolved");
      return KernelSpec::product(KernelSpec::tanh_threshold(task.c), KernelSpec::delta(), label,
                                 zs);
    }
    case TaskName::distribution:
    case TaskName::individual:
    case TaskName::local:
      return KernelSpec::product(KernelSpec::rbf_median(), KernelSpec::rbf_median(), label, zs);
    case TaskName::canonical:
    case TaskName::toplabel:
    case TaskName::marginal_cls:
      return KernelSpec::product(KernelSpec::delta(), KernelSpec::rbf_median(), label, zs);
  }
  return KernelSpec::rbf_median();
}

}  // namespace calikit
