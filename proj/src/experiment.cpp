#include "calikit/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "calikit/adam.hpp"
#include "calikit/checkpoint.hpp"
#include "calikit/mmd.hpp"
#include "calikit/normal.hpp"
#include "calikit/parallel.hpp"
#include "calikit/rng.hpp"

namespace calikit {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Named sub-streams of the run seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kNoiseStream = 3;
constexpr std::uint64_t kValNoiseStream = 4;
constexpr std::uint64_t kKernelStream = 5;
constexpr std::uint64_t kKceStream = 6;

std::string join_lines(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : "\n") + s;
  return out;
}

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

// Collects config problems instead of stopping at the first.
class Reader {
 public:
  explicit Reader(std::vector<std::string>& errors) : errors_(errors) {}

  const json* object(const json& parent, const std::string& key, const std::string& path) {
    if (!parent.contains(key)) return nullptr;
    const json& v = parent[key];
    if (!v.is_object()) {
      fail(path, "expected an object");
      return nullptr;
    }
    return &v;
  }

  void string(const json* obj, const std::string& key, const std::string& path, std::string& out) {
    if (!obj || !obj->contains(key) || (*obj)[key].is_null()) return;
    if (!(*obj)[key].is_string()) return fail(path, "expected a string");
    out = (*obj)[key].get<std::string>();
  }

  void real(const json* obj, const std::string& key, const std::string& path, double& out) {
    if (!obj || !obj->contains(key) || (*obj)[key].is_null()) return;
    if (!(*obj)[key].is_number()) return fail(path, "expected a number");
    out = (*obj)[key].get<double>();
  }

  template <class Int>
  void integer(const json* obj, const std::string& key, const std::string& path, Int& out) {
    if (!obj || !obj->contains(key) || (*obj)[key].is_null()) return;
    const json& v = (*obj)[key];
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0)) {
      return fail(path, "expected a non-negative integer");
    }
    out = v.get<Int>();
  }

  void fail(const std::string& path, const std::string& msg) { errors_.push_back(path + ": " + msg); }

  void unknown_keys(const json* obj, const std::string& path, std::initializer_list<const char*> known) {
    if (!obj) return;
    for (auto it = obj->begin(); it != obj->end(); ++it) {
      if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; })) {
        fail(path.empty() ? it.key() : path + "." + it.key(), "unknown key");
      }
    }
  }

 private:
  std::vector<std::string>& errors_;
};

json nan_or(double v, const char* alt) { return std::isnan(v) ? json(alt) : json(v); }

double median_of(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

// Training-unit copy of the task: label thresholds converted to standardised
// units and local features bound to column indices.
CalibrationTask training_task(const CalibrationTask& raw, const PreparedData& data) {
  CalibrationTask t = raw;
  if (t.family() == Family::regression) {
    if (!std::isnan(t.y0)) t.y0 = data.y_std.apply(t.y0);
    if (!std::isnan(t.c)) t.c = data.y_std.apply(t.c);
  }
  return t;
}

struct BatchData {
  Array x;
  std::vector<double> y;
  std::vector<int> groups;
  BatchView view() const { return {x, y, groups}; }
};

BatchData gather(const Dataset& d, std::span<const std::size_t> idx) {
  BatchData b;
  b.x = take_rows(d.x, idx);
  b.y.reserve(idx.size());
  for (std::size_t i : idx) b.y.push_back(d.y[i]);
  if (!d.groups.empty())
    for (std::size_t i : idx) b.groups.push_back(d.groups[i]);
  return b;
}

// Consecutive batches of `size`; a trailing batch of one example is merged
// into its predecessor so every batch supports the pairwise estimator.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                   std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < order.size(); start += size) {
    const std::size_t end = std::min(order.size(), start + size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (out.size() > 1 && out.back().size() < 2) {
    auto last = std::move(out.back());
    out.pop_back();
    out.back().insert(out.back().end(), last.begin(), last.end());
  }
  return out;
}

struct Model {
  std::optional<GaussianForecaster> regressor;
  std::optional<CategoricalForecaster> classifier;

  Mlp& net() { return regressor ? regressor->net() : classifier->net(); }
  const Mlp& net() const { return regressor ? regressor->net() : classifier->net(); }
};

TrainingLoss batch_loss(Tape& tape, const Model& model, std::span<const Var> bound,
                        const BatchView& batch, const CalibrationTask& task,
                        const KernelSpec& kernel, const Objective& obj, Rng& rng) {
  if (model.regressor) {
    return regression_training_loss(tape, *model.regressor, bound, batch, task, kernel, obj, rng);
  }
  return classification_training_loss(tape, *model.classifier, bound, batch, task, kernel, obj);
}

// Rows the joint kernel sees on the target side, computed with the initial
// model on a prefix of the training set, for the median heuristic.
Array kernel_reference_rows(const Model& model, const Dataset& train, const CalibrationTask& task,
                            std::size_t samples, std::uint64_t seed) {
  std::vector<std::size_t> idx(std::min<std::size_t>(train.size(), 512));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  BatchData b = gather(train, idx);
  Tape tape(false);
  auto bound = model.net().bind(tape);
  Var x = tape.constant(b.x, "x");
  if (model.regressor) {
    Rng rng(mix_seed(seed, kKernelStream));
    auto out = model.regressor->forward(tape, bound, x);
    auto pairs = build_regression_pairs(tape, task, out, b.view(), samples, rng);
    return tape.value(pairs.target);
  }
  Var logits = model.classifier->forward(tape, bound, x);
  auto channels = build_classification_pairs(tape, task, logits, b.view());
  const auto& ch = channels.front();
  const std::size_t dz = ch.z ? tape.value(*ch.z).cols() : 0;
  Array rows(ch.target.size(), 1 + dz);
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    rows(i, 0) = static_cast<double>(ch.target[i]);
    for (std::size_t c = 0; c < dz; ++c) rows(i, 1 + c) = tape.value(*ch.z)(i, c);
  }
  return rows;
}

}  // namespace

ConfigError::ConfigError(const std::vector<std::string>& problems)
    : std::invalid_argument(join_lines(problems)), problems_(problems) {}

json ExperimentConfig::to_json() const {
  json ds{{"kind", dataset.kind}};
  if (dataset.kind == "csv") {
    ds["path"] = dataset.path;
    ds["target"] = dataset.target;
    ds["group_column"] = dataset.group_column;
  } else {
    ds["synthetic"] = {{"name", dataset.synthetic_name},
                       {"n", dataset.n},
                       {"m", dataset.classes},
                       {"seed", dataset.synthetic_seed.value_or(seed)}};
  }
  json task_json = task.to_json();
  if (!task_feature_names.empty()) task_json["features"] = task_feature_names;
  json j{
      {"dataset", ds},
      {"family", to_string(family)},
      {"calibration_task", task_json},
      {"kernel", kernel ? *kernel : json(nullptr)},
      {"model", {{"hidden", hidden}, {"sigma_min", sigma_min}}},
      {"objective",
       {{"lambda", lambda}, {"batch_size", batch_size}, {"samples_per_forecast", samples}}},
      {"optimizer", {{"lr", lr}, {"max_epochs", max_epochs}, {"patience", patience}}},
      {"metrics",
       {{"qce_levels", metrics.qce_levels},
        {"ece_bins", metrics.ece_bins},
        {"kce_samples", metrics.kce_samples},
        {"lce_levels", metrics.lce_levels},
        {"lce_bandwidth", metrics.lce_bandwidth},
        {"lce_features", metrics.lce_features},
        {"dce_c", nan_or(metrics.dce_c, "median")}}},
      {"seed", seed},
      {"output_dir", output_dir},
  };
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  std::vector<std::string> errors;
  if (!j.is_object()) throw ConfigError({"config: expected a JSON object"});
  Reader r(errors);
  ExperimentConfig c;
  r.unknown_keys(&j, "", {"dataset", "family", "calibration_task", "kernel", "model", "objective",
                          "optimizer", "metrics", "seed", "output_dir"});

  std::string family = "regression";
  r.string(&j, "family", "family", family);
  if (family == "regression" || family == "classification") {
    c.family = family_from_string(family);
  } else {
    r.fail("family", "expected \"regression\" or \"classification\", got \"" + family + "\"");
  }
  r.integer(&j, "seed", "seed", c.seed);
  r.string(&j, "output_dir", "output_dir", c.output_dir);

  if (const json* ds = r.object(j, "dataset", "dataset")) {
    r.unknown_keys(ds, "dataset", {"kind", "path", "target", "group_column", "synthetic"});
    r.string(ds, "kind", "dataset.kind", c.dataset.kind);
    r.string(ds, "path", "dataset.path", c.dataset.path);
    r.string(ds, "target", "dataset.target", c.dataset.target);
    r.string(ds, "group_column", "dataset.group_column", c.dataset.group_column);
    if (c.dataset.kind == "csv") {
      if (c.dataset.path.empty()) r.fail("dataset.path", "required for a csv dataset");
      if (c.dataset.target.empty()) r.fail("dataset.target", "required for a csv dataset");
    } else if (c.dataset.kind == "synthetic") {
      if (const json* syn = r.object(*ds, "synthetic", "dataset.synthetic")) {
        r.unknown_keys(syn, "dataset.synthetic", {"name", "n", "m", "seed"});
        r.string(syn, "name", "dataset.synthetic.name", c.dataset.synthetic_name);
        r.integer(syn, "n", "dataset.synthetic.n", c.dataset.n);
        r.integer(syn, "m", "dataset.synthetic.m", c.dataset.classes);
        if (syn->contains("seed") && !(*syn)["seed"].is_null()) {
          std::uint64_t s = 0;
          r.integer(syn, "seed", "dataset.synthetic.seed", s);
          c.dataset.synthetic_seed = s;
        }
      }
      const auto& name = c.dataset.synthetic_name;
      if (name != "heteroscedastic" && name != "classification" && name != "geo") {
        r.fail("dataset.synthetic.name", "unknown generator \"" + name +
                                             "\" (heteroscedastic, classification, geo)");
      } else if ((name == "classification") != (c.family == Family::classification)) {
        r.fail("dataset.synthetic.name", "generator \"" + name + "\" does not produce " +
                                             to_string(c.family) + " data");
      }
      if (c.dataset.n < 10) r.fail("dataset.synthetic.n", "need at least 10 rows");
      if (name == "classification" && (c.dataset.classes < 2 || c.dataset.classes > 10)) {
        r.fail("dataset.synthetic.m", "classes must be in [2, 10]");
      }
    } else {
      r.fail("dataset.kind", "expected \"csv\" or \"synthetic\", got \"" + c.dataset.kind + "\"");
    }
  } else {
    r.fail("dataset", "required");
  }

  if (j.contains("calibration_task")) {
    json tj = j["calibration_task"];
    if (tj.is_object() && tj.contains("features") && tj["features"].is_array() &&
        !tj["features"].empty() && tj["features"][0].is_string()) {
      for (const auto& f : tj["features"]) {
        if (!f.is_string()) {
          r.fail("calibration_task.features", "mix of names and indices");
          break;
        }
        c.task_feature_names.push_back(f.get<std::string>());
      }
      json placeholder = json::array();
      for (std::size_t k = 0; k < c.task_feature_names.size(); ++k) placeholder.push_back(k);
      tj["features"] = placeholder;
    }
    try {
      c.task = CalibrationTask::from_json(tj);
      if (c.task.family() != c.family) {
        r.fail("calibration_task.name", "task \"" + to_string(c.task.name) + "\" is a " +
                                            to_string(c.task.family()) + " task but family is " +
                                            to_string(c.family));
      }
      if (c.task.name == TaskName::group && c.task.group_column.empty()) {
        c.task.group_column = c.dataset.group_column.empty() ? "group" : c.dataset.group_column;
      }
    } catch (const std::exception& e) {
      r.fail("calibration_task", e.what());
    }
  } else if (c.family == Family::classification) {
    c.task.name = TaskName::canonical;
  }

  if (j.contains("kernel") && !j["kernel"].is_null()) {
    try {
      KernelSpec::from_json(j["kernel"]);
      c.kernel = j["kernel"];
    } catch (const std::exception& e) {
      r.fail("kernel", e.what());
    }
  }

  if (const json* m = r.object(j, "model", "model")) {
    r.unknown_keys(m, "model", {"hidden", "sigma_min"});
    if (m->contains("hidden")) {
      const json& h = (*m)["hidden"];
      if (!h.is_array() || std::any_of(h.begin(), h.end(), [](const json& v) {
            return !v.is_number_integer() || v.get<std::int64_t>() <= 0;
          })) {
        r.fail("model.hidden", "expected an array of positive layer widths");
      } else {
        c.hidden = h.get<std::vector<std::size_t>>();
      }
    }
    r.real(m, "sigma_min", "model.sigma_min", c.sigma_min);
  }
  if (!(c.sigma_min > 0.0)) r.fail("model.sigma_min", "must be > 0");

  if (const json* o = r.object(j, "objective", "objective")) {
    r.unknown_keys(o, "objective", {"lambda", "batch_size", "samples_per_forecast"});
    r.real(o, "lambda", "objective.lambda", c.lambda);
    r.integer(o, "batch_size", "objective.batch_size", c.batch_size);
    r.integer(o, "samples_per_forecast", "objective.samples_per_forecast", c.samples);
  }
  if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) r.fail("objective.lambda", "must be a finite value >= 0");
  if (c.batch_size < 2) r.fail("objective.batch_size", "must be >= 2");
  if (c.samples < 1) r.fail("objective.samples_per_forecast", "must be >= 1");

  if (const json* o = r.object(j, "optimizer", "optimizer")) {
    r.unknown_keys(o, "optimizer", {"lr", "max_epochs", "patience"});
    r.real(o, "lr", "optimizer.lr", c.lr);
    r.integer(o, "max_epochs", "optimizer.max_epochs", c.max_epochs);
    r.integer(o, "patience", "optimizer.patience", c.patience);
  }
  if (!(c.lr > 0.0)) r.fail("optimizer.lr", "must be > 0");
  if (c.max_epochs < 1) r.fail("optimizer.max_epochs", "must be >= 1");
  if (c.patience < 1) r.fail("optimizer.patience", "must be >= 1");

  if (const json* m = r.object(j, "metrics", "metrics")) {
    r.unknown_keys(m, "metrics", {"qce_levels", "ece_bins", "kce_samples", "lce_levels",
                                  "lce_bandwidth", "lce_features", "dce_c"});
    r.integer(m, "qce_levels", "metrics.qce_levels", c.metrics.qce_levels);
    r.integer(m, "ece_bins", "metrics.ece_bins", c.metrics.ece_bins);
    r.integer(m, "kce_samples", "metrics.kce_samples", c.metrics.kce_samples);
    r.integer(m, "lce_levels", "metrics.lce_levels", c.metrics.lce_levels);
    r.real(m, "lce_bandwidth", "metrics.lce_bandwidth", c.metrics.lce_bandwidth);
    if (m->contains("lce_features")) {
      const json& f = (*m)["lce_features"];
      if (!f.is_array() || std::any_of(f.begin(), f.end(), [](const json& v) { return !v.is_string(); })) {
        r.fail("metrics.lce_features", "expected an array of feature names");
      } else {
        c.metrics.lce_features = f.get<std::vector<std::string>>();
      }
    }
    if (m->contains("dce_c") && (*m)["dce_c"] != "median") r.real(m, "dce_c", "metrics.dce_c", c.metrics.dce_c);
  }
  if (c.metrics.qce_levels < 2) r.fail("metrics.qce_levels", "must be >= 2");
  if (c.metrics.ece_bins < 1) r.fail("metrics.ece_bins", "must be >= 1");
  if (c.metrics.kce_samples < 1) r.fail("metrics.kce_samples", "must be >= 1");
  if (c.metrics.lce_levels < 1) r.fail("metrics.lce_levels", "must be >= 1");
  if (!(c.metrics.lce_bandwidth > 0.0)) r.fail("metrics.lce_bandwidth", "must be > 0");

  if (!errors.empty()) throw ConfigError(errors);
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"--config: cannot open " + path});
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError({"--config: " + path + " is not valid JSON: " + e.what()});
  }
  return ExperimentConfig::from_json(j);
}

const Dataset& PreparedData::part(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ConfigError({"--split: expected train, val or test, got \"" + name + "\""});
}

PreparedData prepare_data(const ExperimentConfig& cfg) {
  PreparedData d;
  if (cfg.dataset.kind == "csv") {
    d.raw = load_csv(cfg.dataset.path, cfg.dataset.target, cfg.family, cfg.dataset.group_column);
    if (cfg.family == Family::classification && d.raw.classes < 2) {
      throw ConfigError({"dataset.target: classification needs at least two classes"});
    }
  } else {
    d.raw = make_synthetic(cfg.dataset.synthetic_name, cfg.dataset.n, cfg.dataset.classes,
                           cfg.dataset.synthetic_seed.value_or(cfg.seed));
  }
  d.split = split_indices(d.raw.size(), cfg.seed);
  Dataset train = subset(d.raw, d.split.train);
  d.x_std = Standardizer::fit(train.x);
  d.y_std = cfg.family == Family::regression ? Standardizer::fit(std::span<const double>(train.y))
                                             : Standardizer{{0.0}, {1.0}};
  if (cfg.family == Family::regression) d.train_label_median = median_of(train.y);

  auto finish = [&](const std::vector<std::size_t>& idx) {
    Dataset p = subset(d.raw, idx);
    p.x = d.x_std.apply(p.x);
    if (cfg.family == Family::regression) {
      for (double& v : p.y) v = d.y_std.apply(v);
      if (p.truth) {
        for (double& m : p.truth->mu) m = d.y_std.apply(m);
        for (double& s : p.truth->sigma) s /= d.y_std.std[0];
      }
    }
    return p;
  };
  d.train = finish(d.split.train);
  d.val = finish(d.split.val);
  d.test = finish(d.split.test);
  return d;
}

bool EarlyStopping::update(double val_loss) {
  ++epoch_;
  improved_ = val_loss < best_;
  if (improved_) {
    best_ = val_loss;
    best_epoch_ = epoch_;
    since_ = 0;
  } else {
    ++since_;
  }
  return since_ >= patience_;
}

namespace {

// Resolves the configured task against the data: median thresholds and
// feature names are replaced by concrete values (raw label units).
ExperimentConfig materialize(const ExperimentConfig& cfg, const PreparedData& data) {
  ExperimentConfig c = cfg;
  if (!c.dataset.synthetic_seed && c.dataset.kind == "synthetic") c.dataset.synthetic_seed = c.seed;
  if (c.task.name == TaskName::threshold && std::isnan(c.task.y0)) c.task.y0 = data.train_label_median;
  if (c.task.name == TaskName::decision && std::isnan(c.task.c)) c.task.c = data.train_label_median;
  if (c.family == Family::regression && std::isnan(c.metrics.dce_c)) {
    c.metrics.dce_c = c.task.name == TaskName::decision ? c.task.c : data.train_label_median;
  }
  if (!c.task_feature_names.empty()) {
    std::vector<std::string> errors;
    c.task.features.clear();
    for (const auto& name : c.task_feature_names) {
      try {
        c.task.features.push_back(data.raw.feature_index(name));
      } catch (const std::exception&) {
        errors.push_back("calibration_task.features: unknown feature \"" + name + "\"");
      }
    }
    if (!errors.empty()) throw ConfigError(errors);
  }
  for (const auto& name : c.metrics.lce_features) {
    if (std::find(data.raw.feature_names.begin(), data.raw.feature_names.end(), name) ==
        data.raw.feature_names.end()) {
      throw ConfigError({"metrics.lce_features: unknown feature \"" + name + "\""});
    }
  }
  if (c.task.name == TaskName::group && data.raw.groups.empty()) {
    throw ConfigError({"calibration_task.group_column: dataset has no group column \"" +
                       c.task.group_column + "\""});
  }
  return c;
}

json standardization_json(const PreparedData& d) {
  return {{"x_mean", d.x_std.mean}, {"x_std", d.x_std.std}, {"y_mean", d.y_std.mean[0]},
          {"y_std", d.y_std.std[0]}};
}

}  // namespace

TrainResult train(const ExperimentConfig& cfg_in, const std::string& run_dir) {
  const PreparedData data = prepare_data(cfg_in);
  const ExperimentConfig cfg = materialize(cfg_in, data);
  const CalibrationTask task = training_task(cfg.task, data);
  const std::size_t d = data.train.x.cols();

  Rng init_rng(mix_seed(cfg.seed, kInitStream));
  Model model;
  if (cfg.family == Family::regression) {
    model.regressor.emplace(d, cfg.hidden, cfg.sigma_min, init_rng);
  } else {
    model.classifier.emplace(d, cfg.hidden, data.raw.classes, init_rng);
  }

  KernelSpec kernel = cfg.kernel ? KernelSpec::from_json(*cfg.kernel)
                                 : default_kernel(task, task.z_dim(d, data.raw.classes));
  if (!kernel.resolved()) {
    kernel = resolve_bandwidths(kernel,
                                kernel_reference_rows(model, data.train, task, cfg.samples, cfg.seed));
  }
  const Objective objective{cfg.lambda, cfg.samples};

  Adam adam(AdamConfig{cfg.lr});
  EarlyStopping stopper(cfg.patience);
  Rng shuffle_rng(mix_seed(cfg.seed, kShuffleStream));
  Rng noise_rng(mix_seed(cfg.seed, kNoiseStream));
  std::vector<Array> best_params = model.net().params();

  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<std::size_t> val_order(data.val.size());
  for (std::size_t i = 0; i < val_order.size(); ++i) val_order[i] = i;
  const auto val_batches = make_batches(val_order, cfg.batch_size);
  const Objective val_objective{data.val.size() >= 2 ? cfg.lambda : 0.0, cfg.samples};

  TrainResult result;
  bool stopped_early = false;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[shuffle_rng.below(i + 1)]);
    double train_sum = 0.0;
    std::size_t train_count = 0;
    try {
      for (std::size_t start = 0; start + 2 <= order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        if (end - start < 2) break;
        const std::span<const std::size_t> idx(order.data() + start, end - start);
        BatchData b = gather(data.train, idx);
        Tape tape;
        auto bound = model.net().bind(tape);
        auto loss = batch_loss(tape, model, bound, b.view(), task, kernel, objective, noise_rng);
        const double value = tape.value(loss.total).item();
        if (!std::isfinite(value)) throw NumericalError("non-finite training loss");
        tape.backward(loss.total);
        std::vector<Array> grads;
        grads.reserve(bound.size());
        for (Var v : bound) grads.push_back(tape.grad(v));
        adam.step(model.net().params(), grads);
        train_sum += value;
        train_count += idx.size();
      }

      Rng val_rng(mix_seed(cfg.seed, kValNoiseStream));
      double val_sum = 0.0;
      for (const auto& idx : val_batches) {
        BatchData b = gather(data.val, idx);
        Tape tape(false);
        auto bound = model.net().bind(tape);
        const Objective& vo = idx.size() >= 2 ? val_objective : Objective{0.0, cfg.samples};
        auto loss = batch_loss(tape, model, bound, b.view(), task, kernel, vo, val_rng);
        val_sum += tape.value(loss.total).item();
      }
      const double val_loss = val_sum / static_cast<double>(data.val.size());
      if (!std::isfinite(val_loss)) throw NumericalError("non-finite validation loss");

      EpochRecord rec;
      rec.epoch = epoch;
      rec.train_loss = train_count ? train_sum / static_cast<double>(train_count) : 0.0;
      rec.val_loss = val_loss;
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.log.push_back(rec);

      const bool stop = stopper.update(val_loss);
      if (stopper.improved()) best_params = model.net().params();
      if (stop) {
        stopped_early = true;
        break;
      }
    } catch (const NumericalError& e) {
      throw NumericalError("epoch " + std::to_string(epoch) + ": " + e.what());
    }
  }
  model.net().params() = best_params;
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best();

  json manifest{
      {"format", kCheckpointMagic},
      {"config", cfg.to_json()},
      {"family", to_string(cfg.family)},
      {"training_task", task.to_json()},
      {"kernel", kernel.to_json()},
      {"model",
       {{"input_dim", d},
        {"hidden", cfg.hidden},
        {"output_dim", model.net().shape().output_dim},
        {"sigma_min", cfg.family == Family::regression ? model.regressor->sigma_min() : 0.0}}},
      {"feature_names", data.raw.feature_names},
      {"classes", data.raw.classes},
      {"class_names", data.raw.class_names},
      {"dropped_rows", data.raw.dropped_rows},
      {"standardization", standardization_json(data)},
      {"split",
       {{"seed", cfg.seed},
        {"train", data.split.train.size()},
        {"val", data.split.val.size()},
        {"test", data.split.test.size()}}},
      {"rng",
       {{"algorithm", std::string(Rng::kAlgorithm)},
        {"seed_mixer", "splitmix64"},
        {"streams",
         {{"init", kInitStream},
          {"shuffle", kShuffleStream},
          {"noise", kNoiseStream},
          {"val_noise", kValNoiseStream},
          {"kernel", kKernelStream},
          {"kce", kKceStream}}}}},
      {"training",
       {{"epochs_run", result.log.size()},
        {"best_epoch", result.best_epoch},
        {"best_val_loss", result.best_val_loss},
        {"stopped_early", stopped_early}}},
  };
  result.manifest = manifest;

  fs::create_directories(run_dir);
  Checkpoint ckpt{manifest, model.net().param_names(), model.net().params()};
  save_checkpoint((fs::path(run_dir) / "model.ckpt").string(), ckpt);
  write_text(fs::path(run_dir) / "manifest.json", manifest.dump(2) + "\n");
  std::string log = "epoch,train_loss,val_loss,wall_seconds\n";
  for (const auto& r : result.log) {
    log += std::to_string(r.epoch) + "," + format_double(r.train_loss) + "," +
           format_double(r.val_loss) + "," + format_double(r.seconds) + "\n";
  }
  write_text(fs::path(run_dir) / "train_log.csv", log);
  return result;
}

LoadedRun load_run(const std::string& run_dir) {
  const fs::path path = fs::path(run_dir) / "model.ckpt";
  if (!fs::exists(path)) throw ConfigError({"--run-dir: no checkpoint at " + path.string()});
  Checkpoint ckpt = load_checkpoint(path.string());
  LoadedRun run;
  run.manifest = ckpt.manifest;
  run.config = ExperimentConfig::from_json(ckpt.manifest.at("config"));
  const json& m = ckpt.manifest.at("model");
  MlpShape shape{m.at("input_dim").get<std::size_t>(), m.at("hidden").get<std::vector<std::size_t>>(),
                 m.at("output_dim").get<std::size_t>()};
  Mlp net(shape, ckpt.params);
  if (run.config.family == Family::regression) {
    run.regressor.emplace(std::move(net), m.at("sigma_min").get<double>());
  } else {
    run.classifier.emplace(std::move(net));
  }
  if (ckpt.manifest.contains("posthoc") && !ckpt.manifest["posthoc"].is_null()) {
    const json& p = ckpt.manifest["posthoc"];
    const std::string method = p.at("method").get<std::string>();
    if (method == "isotonic") run.isotonic = QuantileRecalibrator::from_json(p);
    else if (method == "temperature") run.temperature = TemperatureScaler{p.at("temperature").get<double>()};
    else throw std::runtime_error(path.string() + ": unknown posthoc method " + method);
  }
  return run;
}

namespace {

void check_split(const LoadedRun& run, const PreparedData& data) {
  const json& s = run.manifest.at("split");
  if (s.at("train").get<std::size_t>() != data.split.train.size() ||
      s.at("val").get<std::size_t>() != data.split.val.size() ||
      s.at("test").get<std::size_t>() != data.split.test.size()) {
    throw std::runtime_error("split mismatch with manifest: data now yields " +
                             std::to_string(data.split.train.size()) + "/" +
                             std::to_string(data.split.val.size()) + "/" +
                             std::to_string(data.split.test.size()));
  }
}

std::vector<double> raw_labels(const PreparedData& data, const Dataset& part) {
  std::vector<double> y(part.y);
  for (double& v : y) v = data.y_std.invert(v);
  return y;
}

Array raw_columns(const PreparedData& data, const Dataset& part, const std::vector<std::size_t>& cols) {
  Array out(part.size(), cols.size());
  for (std::size_t i = 0; i < part.size(); ++i)
    for (std::size_t k = 0; k < cols.size(); ++k) out(i, k) = data.x_std.invert(part.x(i, cols[k]), cols[k]);
  return out;
}

std::vector<double> recal_pits(const LoadedRun& run, const GaussianForecasts& f, std::span<const double> ys) {
  auto p = pits(f, ys);
  if (run.isotonic)
    for (double& v : p) v = (*run.isotonic)(v);
  return p;
}

}  // namespace

GaussianForecasts predict_raw(const LoadedRun& run, const PreparedData& data, const Dataset& part) {
  if (!run.regressor) throw ConfigError({"family: run is not a regression run"});
  GaussianForecasts f = run.regressor->predict(part.x);
  for (std::size_t i = 0; i < f.size(); ++i) {
    f.mu[i] = data.y_std.invert(f.mu[i]);
    f.sigma[i] *= data.y_std.std[0];
  }
  return f;
}

std::vector<LceCell> lce_grid(std::span<const double> pit, const Array& phi_raw,
                              std::span<const double> phi_scale, std::size_t grid,
                              double bandwidth, std::size_t levels) {
  if (phi_raw.cols() != 2 || phi_scale.size() != 2) {
    throw std::invalid_argument("lce_grid: expected two phi columns");
  }
  if (grid < 1) throw std::invalid_argument("--grid: must be >= 1");
  if (phi_raw.rows() == 0) throw std::invalid_argument("lce_grid: empty data");
  double lo[2], hi[2];
  for (std::size_t c = 0; c < 2; ++c) {
    lo[c] = hi[c] = phi_raw(0, c);
    for (std::size_t i = 1; i < phi_raw.rows(); ++i) {
      lo[c] = std::min(lo[c], phi_raw(i, c));
      hi[c] = std::max(hi[c], phi_raw(i, c));
    }
  }
  auto coord = [&](std::size_t c, std::size_t k) {
    if (grid == 1) return 0.5 * (lo[c] + hi[c]);
    return lo[c] + (hi[c] - lo[c]) * static_cast<double>(k) / static_cast<double>(grid - 1);
  };
  Array phi(phi_raw.rows(), 2);
  for (std::size_t i = 0; i < phi.rows(); ++i)
    for (std::size_t c = 0; c < 2; ++c) phi(i, c) = phi_raw(i, c) * phi_scale[c];
  const KernelSpec kernel = KernelSpec::rbf(bandwidth);

  std::vector<LceCell> cells(grid * grid);
  parallel_rows(cells.size(), [&](std::size_t k) {
    LceCell& cell = cells[k];
    cell.f1 = coord(0, k / grid);
    cell.f2 = coord(1, k % grid);
    const double q[2] = {cell.f1 * phi_scale[0], cell.f2 * phi_scale[1]};
    try {
      auto r = lce_at(pit, phi, q, kernel, levels);
      cell.lce_total = r.total;
      cell.weight_sum = r.weight_sum;
    } catch (const ZeroWeightError&) {
      cell.weight_sum = 0.0;
    }
  });
  return cells;
}

MetricReport evaluate(const LoadedRun& run, const PreparedData& data, const std::string& split) {
  const Dataset& part = data.part(split);
  check_split(run, data);
  const ExperimentConfig& cfg = run.config;
  MetricReport report;
  report.meta = {{"split", split},
                 {"n", part.size()},
                 {"family", to_string(cfg.family)},
                 {"task", to_string(cfg.task.name)},
                 {"seed", cfg.seed},
                 {"training_kernel", run.manifest.at("kernel")}};

  if (cfg.family == Family::regression) {
    const GaussianForecasts f = predict_raw(run, data, part);
    const std::vector<double> ys = raw_labels(data, part);
    const auto pit = recal_pits(run, f, ys);
    report.set("qce", qce_from_pits(pit, cfg.metrics.qce_levels));

    double nll = 0.0;
    for (std::size_t i = 0; i < ys.size(); ++i) {
      nll += run.isotonic ? recalibrated_nll(*run.isotonic, f.mu[i], f.sigma[i], ys[i])
                          : gaussian_nll(f.mu[i], f.sigma[i], ys[i]);
    }
    // Reported on standardised labels: the raw density carries a 1/std factor.
    report.set("nll", nll / static_cast<double>(ys.size()) - std::log(data.y_std.std[0]));
    report.meta["nll_units"] = "standardized";

    const double c = cfg.metrics.dce_c;
    std::vector<double> q(ys.size());
    for (std::size_t i = 0; i < ys.size(); ++i) {
      q[i] = run.isotonic ? recalibrate_cdf(*run.isotonic, f.mu[i], f.sigma[i], c)
                          : gaussian_cdf(f.mu[i], f.sigma[i], c);
    }
    const DceResult dr = dce_from_cdf(q, ys, c);
    report.set("dce", dr.dce);
    report.set("dce_squared", dr.dce_squared);
    report.meta["dce_c"] = c;

    if (part.size() >= 2) {
      const std::size_t s = cfg.metrics.kce_samples;
      Rng rng(mix_seed(cfg.seed, kKceStream));
      std::vector<double> draws(ys.size() * s);
      for (std::size_t i = 0; i < ys.size(); ++i) {
        for (std::size_t k = 0; k < s; ++k) {
          const double u = rng.uniform_open();
          draws[i * s + k] = run.isotonic ? recalibrate_icdf(*run.isotonic, f.mu[i], f.sigma[i], u)
                                          : f.mu[i] + f.sigma[i] * normal_icdf(u);
        }
      }
      // Labels enter the kernel in standardised units, like the features.
      std::vector<double> ys_std(ys.size());
      for (std::size_t i = 0; i < ys.size(); ++i) ys_std[i] = data.y_std.apply(ys[i]);
      for (double& v : draws) v = data.y_std.apply(v);
      report.set("kce", kce_regression_samples(part.x, ys_std, draws, s,
                                               default_kce_kernel(part.x.cols(), false)));
    }

    std::vector<std::size_t> lce_cols;
    for (const auto& name : cfg.metrics.lce_features) lce_cols.push_back(data.raw.feature_index(name));
    if (lce_cols.empty() && cfg.task.name == TaskName::local) lce_cols = cfg.task.features;
    if (lce_cols.size() == 2) {
      const double scale[2] = {1.0 / data.x_std.std[lce_cols[0]], 1.0 / data.x_std.std[lce_cols[1]]};
      auto cells = lce_grid(pit, raw_columns(data, part, lce_cols), scale, 5,
                            cfg.metrics.lce_bandwidth, cfg.metrics.lce_levels);
      double sum = 0.0;
      std::size_t used = 0;
      for (const auto& cell : cells) {
        if (cell.lce_total) {
          sum += *cell.lce_total;
          ++used;
        }
      }
      if (used) report.set("lce_total_mean", sum / static_cast<double>(used));
      report.meta["lce_features"] = json::array({data.raw.feature_names[lce_cols[0]],
                                                 data.raw.feature_names[lce_cols[1]]});
    }
    report.meta["posthoc"] = run.isotonic ? "isotonic" : "none";
  } else {
    const Array logits = run.classifier->predict_logits(part.x);
    const double t = run.temperature ? run.temperature->temperature : 1.0;
    const Array pmf = softmax_rows(logits, t);
    const auto ys = part.class_labels();
    report.set("accuracy", accuracy(pmf, ys));
    std::size_t clamped = 0;
    double nll = 0.0;
    for (std::size_t i = 0; i < ys.size(); ++i) nll += xent(pmf.row_span(i), ys[i], &clamped);
    report.set("nll", nll / static_cast<double>(ys.size()));
    report.set("ece", ece(pmf, ys, cfg.metrics.ece_bins));
    report.set("entropy", mean_entropy(pmf));
    if (part.size() >= 2) {
      report.set("kce", kce_classification(part.x, ys, pmf, default_kce_kernel(part.x.cols(), true)));
    }
    report.meta["xent_clamped"] = clamped;
    report.meta["posthoc"] = run.temperature ? "temperature" : "none";
    report.meta["temperature"] = t;
  }
  return report;
}

MetricReport cmd_eval(const std::string& run_dir, const std::string& split, const std::string& out) {
  const LoadedRun run = load_run(run_dir);
  const PreparedData data = prepare_data(run.config);
  MetricReport report = evaluate(run, data, split);
  const std::string path = out.empty() ? (fs::path(run_dir) / ("metrics_" + split + ".json")).string() : out;
  write_text(path, report.to_json().dump(2) + "\n");
  return report;
}

RecalSummary cmd_recal(const std::string& run_dir, const std::string& method) {
  LoadedRun run = load_run(run_dir);
  const bool regression = run.config.family == Family::regression;
  if (method != "isotonic" && method != "temperature") {
    throw ConfigError({"--method: expected isotonic or temperature, got \"" + method + "\""});
  }
  if ((method == "isotonic") != regression) {
    throw ConfigError({"--method: " + method + " recalibration does not apply to a " +
                       to_string(run.config.family) + " run"});
  }
  const PreparedData data = prepare_data(run.config);
  check_split(run, data);

  RecalSummary s;
  s.method = method;
  json posthoc;
  if (regression) {
    const GaussianForecasts f = predict_raw(run, data, data.val);
    const auto p = pits(f, raw_labels(data, data.val));
    const QuantileRecalibrator r = fit_isotonic(p);
    std::vector<double> mapped(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) mapped[i] = r(p[i]);
    s.before = qce_from_pits(p, run.config.metrics.qce_levels);
    s.after = qce_from_pits(mapped, run.config.metrics.qce_levels);
    posthoc = r.to_json();
  } else {
    const Array logits = run.classifier->predict_logits(data.val.x);
    const auto ys = data.val.class_labels();
    bool degenerate = false;
    const TemperatureScaler t = fit_temperature(logits, ys, &degenerate);
    s.before = mean_xent_at_temperature(logits, ys, 1.0);
    s.after = mean_xent_at_temperature(logits, ys, t.temperature);
    s.temperature = t.temperature;
    posthoc = {{"method", "temperature"}, {"temperature", t.temperature}, {"degenerate", degenerate}};
  }

  const fs::path path = fs::path(run_dir) / "model.ckpt";
  Checkpoint ckpt = load_checkpoint(path.string());
  ckpt.manifest["posthoc"] = posthoc;  // replaces any earlier recalibrator
  save_checkpoint(path.string(), ckpt);
  write_text(fs::path(run_dir) / "manifest.json", ckpt.manifest.dump(2) + "\n");
  return s;
}

std::vector<LceCell> cmd_lce_map(const std::string& run_dir, const std::string& f1,
                                 const std::string& f2, std::size_t grid, const std::string& out) {
  const LoadedRun run = load_run(run_dir);
  if (run.config.family != Family::regression) {
    throw ConfigError({"--run-dir: lce-map needs a regression run"});
  }
  if (grid < 1) throw ConfigError({"--grid: must be >= 1"});
  const PreparedData data = prepare_data(run.config);
  check_split(run, data);
  std::vector<std::size_t> cols;
  for (const auto& name : {f1, f2}) {
    auto it = std::find(data.raw.feature_names.begin(), data.raw.feature_names.end(), name);
    if (it == data.raw.feature_names.end()) throw ConfigError({"--features: unknown feature \"" + name + "\""});
    cols.push_back(static_cast<std::size_t>(it - data.raw.feature_names.begin()));
  }
  const GaussianForecasts f = predict_raw(run, data, data.test);
  const auto pit = recal_pits(run, f, raw_labels(data, data.test));
  const double scale[2] = {1.0 / data.x_std.std[cols[0]], 1.0 / data.x_std.std[cols[1]]};
  auto cells = lce_grid(pit, raw_columns(data, data.test, cols), scale, grid,
                        run.config.metrics.lce_bandwidth, run.config.metrics.lce_levels);

  std::string csv = "f1,f2,lce_total,neighborhood_weight_sum\n";
  for (const auto& c : cells) {
    csv += format_double(c.f1) + "," + format_double(c.f2) + "," +
           (c.lce_total ? format_double(*c.lce_total) : "") + "," + format_double(c.weight_sum) + "\n";
  }
  write_text(out, csv);
  return cells;
}

json cmd_train_repeats(const ExperimentConfig& cfg, const std::string& run_dir, std::size_t repeats) {
  if (repeats < 1) throw ConfigError({"--repeats: must be >= 1"});
  std::map<std::string, std::vector<double>> values;
  json seeds = json::array();
  for (std::size_t r = 0; r < repeats; ++r) {
    ExperimentConfig c = cfg;
    c.seed = cfg.seed + r;
    const std::string dir = (fs::path(run_dir) / ("seed_" + std::to_string(c.seed))).string();
    train(c, dir);
    const MetricReport rep = cmd_eval(dir, "test");
    for (const auto& [k, v] : rep.values) values[k].push_back(v);
    seeds.push_back(c.seed);
  }
  json metrics = json::object();
  for (const auto& [k, v] : values) {
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double se = v.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
    metrics[k] = {{"mean", mean}, {"stderr", se}, {"n", v.size()}};
  }
  json agg{{"repeats", repeats}, {"seeds", seeds}, {"split", "test"}, {"metrics", metrics}};
  fs::create_directories(run_dir);
  write_text(fs::path(run_dir) / "aggregate.json", agg.dump(2) + "\n");
  return agg;
}

}  // namespace calikit
