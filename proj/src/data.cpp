#include "calikit/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "calikit/rng.hpp"

namespace calikit {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const char* first = s.data();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

// Category order: numeric order when every value is a number, else
// lexicographic.
std::vector<std::string> ordered_categories(const std::set<std::string>& values) {
  std::vector<std::string> cats(values.begin(), values.end());
  const bool numeric = std::all_of(cats.begin(), cats.end(), [](const std::string& s) {
    auto v = parse_number(s);
    return v && std::isfinite(*v);
  });
  if (numeric) {
    std::stable_sort(cats.begin(), cats.end(), [](const std::string& a, const std::string& b) {
      return *parse_number(a) < *parse_number(b);
    });
  }
  return cats;
}

}  // namespace

std::vector<std::size_t> Dataset::class_labels() const {
  std::vector<std::size_t> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = static_cast<std::size_t>(y[i]);
  return out;
}

std::size_t Dataset::feature_index(const std::string& name) const {
  auto it = std::find(feature_names.begin(), feature_names.end(), name);
  if (it == feature_names.end()) throw std::invalid_argument("unknown feature '" + name + "'");
  return static_cast<std::size_t>(it - feature_names.begin());
}

Dataset subset(const Dataset& d, std::span<const std::size_t> idx) {
  Dataset out;
  out.family = d.family;
  out.x = take_rows(d.x, idx);
  out.feature_names = d.feature_names;
  out.target_name = d.target_name;
  out.classes = d.classes;
  out.class_names = d.class_names;
  out.dropped_rows = d.dropped_rows;
  out.y.reserve(idx.size());
  for (std::size_t i : idx) out.y.push_back(d.y.at(i));
  if (!d.groups.empty())
    for (std::size_t i : idx) out.groups.push_back(d.groups[i]);
  if (d.truth) {
    GaussianForecasts t;
    for (std::size_t i : idx) {
      t.mu.push_back(d.truth->mu[i]);
      t.sigma.push_back(d.truth->sigma[i]);
    }
    out.truth = std::move(t);
  }
  if (d.truth_pmf) out.truth_pmf = take_rows(*d.truth_pmf, idx);
  return out;
}

Dataset load_csv(const std::string& path, const std::string& target, Family family,
                 const std::string& group_column) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("dataset.path: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument(path + ": missing header row");
  const auto header = split_line(line);
  const std::size_t width = header.size();

  std::vector<std::vector<std::string>> rows;
  std::size_t dropped = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto cells = split_line(line);
    if (cells.size() != width) {
      ++dropped;
      continue;
    }
    rows.push_back(std::move(cells));
  }

  auto find_col = [&](const std::string& name, const char* key) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw std::invalid_argument(std::string(key) + ": column '" + name + "' not in " + path);
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t target_col = find_col(target, "dataset.target");
  const std::optional<std::size_t> group_col =
      group_column.empty() ? std::nullopt
                           : std::optional<std::size_t>(find_col(group_column, "dataset.group_column"));

  // Column typing by majority of non-empty cells.
  std::vector<bool> numeric(width, false);
  for (std::size_t c = 0; c < width; ++c) {
    std::size_t nums = 0, filled = 0;
    for (const auto& r : rows) {
      if (r[c].empty()) continue;
      ++filled;
      if (parse_number(r[c])) ++nums;
    }
    numeric[c] = filled > 0 && 2 * nums > filled;
  }
  if (family == Family::regression && !numeric[target_col]) {
    throw std::invalid_argument("dataset.target: regression target '" + target +
                                "' is not numeric in " + path);
  }

  // Drop rows whose numeric cells fail to parse or are non-finite, and rows
  // with an empty categorical or target cell.
  std::vector<const std::vector<std::string>*> kept;
  for (const auto& r : rows) {
    bool ok = true;
    for (std::size_t c = 0; c < width && ok; ++c) {
      const bool as_number = numeric[c] && !(c == target_col && family == Family::classification) &&
                             !(group_col && c == *group_col);
      if (as_number) {
        auto v = parse_number(r[c]);
        ok = v && std::isfinite(*v);
      } else {
        ok = !r[c].empty();
      }
    }
    if (ok) kept.push_back(&r);
    else ++dropped;
  }
  if (kept.empty()) throw std::invalid_argument(path + ": no usable rows");

  Dataset d;
  d.family = family;
  d.target_name = target;
  d.dropped_rows = dropped;

  struct Encoded {
    std::size_t col;
    std::vector<std::string> categories;  // empty for numeric columns
  };
  std::vector<Encoded> features;
  for (std::size_t c = 0; c < width; ++c) {
    if (c == target_col || (group_col && c == *group_col)) continue;
    Encoded e{c, {}};
    if (!numeric[c]) {
      std::set<std::string> values;
      for (const auto* r : kept) values.insert((*r)[c]);
      e.categories.assign(values.begin(), values.end());
      for (const auto& v : e.categories) d.feature_names.push_back(header[c] + "=" + v);
    } else {
      d.feature_names.push_back(header[c]);
    }
    features.push_back(std::move(e));
  }

  const std::size_t n = kept.size();
  d.x = Array(n, d.feature_names.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = *kept[i];
    std::size_t out = 0;
    for (const auto& e : features) {
      if (e.categories.empty()) {
        d.x(i, out++) = *parse_number(r[e.col]);
      } else {
        const auto pos = std::lower_bound(e.categories.begin(), e.categories.end(), r[e.col]) -
                         e.categories.begin();
        d.x(i, out + static_cast<std::size_t>(pos)) = 1.0;
        out += e.categories.size();
      }
    }
  }

  d.y.resize(n);
  if (family == Family::regression) {
    for (std::size_t i = 0; i < n; ++i) d.y[i] = *parse_number((*kept[i])[target_col]);
  } else {
    std::set<std::string> values;
    for (const auto* r : kept) values.insert((*r)[target_col]);
    if (values.size() > 1000) {
      throw std::invalid_argument("dataset.target: classification target '" + target + "' has " +
                                  std::to_string(values.size()) + " distinct values (max 1000)");
    }
    d.class_names = ordered_categories(values);
    d.classes = d.class_names.size();
    std::map<std::string, std::size_t> index;
    for (std::size_t k = 0; k < d.classes; ++k) index[d.class_names[k]] = k;
    for (std::size_t i = 0; i < n; ++i) d.y[i] = static_cast<double>(index[(*kept[i])[target_col]]);
  }

  if (group_col) {
    std::set<std::string> values;
    for (const auto* r : kept) values.insert((*r)[*group_col]);
    const auto cats = ordered_categories(values);
    std::map<std::string, int> index;
    for (std::size_t k = 0; k < cats.size(); ++k) index[cats[k]] = static_cast<int>(k);
    d.groups.resize(n);
    for (std::size_t i = 0; i < n; ++i) d.groups[i] = index[(*kept[i])[*group_col]];
  }
  return d;
}

Standardizer Standardizer::fit(const Array& x) {
  if (x.rows() == 0) throw std::invalid_argument("standardizer: empty data");
  Standardizer s;
  const double n = static_cast<double>(x.rows());
  s.mean.assign(x.cols(), 0.0);
  s.std.assign(x.cols(), 0.0);
  for (std::size_t c = 0; c < x.cols(); ++c) {
    double m = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) m += x(r, c);
    m /= n;
    double v = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) v += (x(r, c) - m) * (x(r, c) - m);
    const double sd = std::sqrt(v / n);
    s.mean[c] = m;
    // Constant (or numerically constant) columns pass through unscaled.
    s.std[c] = sd > 1e-12 * std::max(1.0, std::abs(m)) ? sd : 1.0;
  }
  return s;
}

Standardizer Standardizer::fit(std::span<const double> v) {
  return fit(Array::column(v));
}

Array Standardizer::apply(const Array& x) const {
  if (x.cols() != mean.size()) {
    throw std::invalid_argument("standardizer: fitted on " + std::to_string(mean.size()) +
                                " columns, given " + std::to_string(x.cols()));
  }
  Array out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = (x(r, c) - mean[c]) / std[c];
  return out;
}

SplitIndices split_indices(std::size_t n, std::uint64_t seed) {
  if (n < 10) {
    throw std::invalid_argument("split: need at least 10 rows, have " + std::to_string(n));
  }
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(mix_seed(seed, 0x73706c6974ULL));  // "split"
  for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  const std::size_t n_train = n * 7 / 10, n_val = n / 10;
  SplitIndices s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
               perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end());
  return s;
}

Dataset synth_heteroscedastic(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.family = Family::regression;
  d.feature_names = {"x1", "x2", "x3", "x4"};
  d.target_name = "y";
  d.x = Array(n, 4);
  d.y.resize(n);
  d.groups.resize(n);
  GaussianForecasts truth;
  truth.mu.resize(n);
  truth.sigma.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 4; ++c) d.x(i, c) = rng.uniform(-2.0, 2.0);
    const double x1 = d.x(i, 0), x2 = d.x(i, 1);
    truth.mu[i] = std::sin(2.0 * x1) + 0.5 * x2;
    truth.sigma[i] = 0.1 + 0.4 * std::abs(x1);
    d.y[i] = truth.mu[i] + truth.sigma[i] * rng.normal();
    d.groups[i] = x1 > 0.0 ? 1 : 0;
  }
  d.truth = std::move(truth);
  return d;
}

Dataset synth_classification(std::size_t n, std::size_t classes, std::uint64_t seed,
                             double spread) {
  if (classes < 2 || classes > 10) {
    throw std::invalid_argument("synth_classification: classes must be in [2, 10]");
  }
  if (!(spread > 0.0)) throw std::invalid_argument("synth_classification: spread must be > 0");
  constexpr std::size_t dim = 4;
  std::vector<double> prior(classes);
  double total = 0.0;
  for (std::size_t k = 0; k < classes; ++k) total += static_cast<double>(k + 1);
  for (std::size_t k = 0; k < classes; ++k) prior[k] = static_cast<double>(k + 1) / total;
  Array centre(classes, dim);
  for (std::size_t k = 0; k < classes; ++k) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(classes);
    centre(k, 0) = 2.0 * std::cos(a);
    centre(k, 1) = 2.0 * std::sin(a);
  }

  Rng rng(seed);
  Dataset d;
  d.family = Family::classification;
  d.feature_names = {"x1", "x2", "x3", "x4"};
  d.target_name = "label";
  d.classes = classes;
  for (std::size_t k = 0; k < classes; ++k) d.class_names.push_back(std::to_string(k));
  d.x = Array(n, dim);
  d.y.resize(n);
  d.groups.resize(n);
  Array post(n, classes);
  std::vector<double> logp(classes);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    std::size_t k = 0;
    double acc = prior[0];
    while (k + 1 < classes && u >= acc) acc += prior[++k];
    for (std::size_t c = 0; c < dim; ++c) d.x(i, c) = centre(k, c) + spread * rng.normal();
    d.y[i] = static_cast<double>(k);
    d.groups[i] = d.x(i, 0) > 0.0 ? 1 : 0;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < classes; ++j) {
      double sq = 0.0;
      for (std::size_t c = 0; c < dim; ++c) sq += (d.x(i, c) - centre(j, c)) * (d.x(i, c) - centre(j, c));
      logp[j] = std::log(prior[j]) - sq / (2.0 * spread * spread);
      mx = std::max(mx, logp[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < classes; ++j) z += std::exp(logp[j] - mx);
    for (std::size_t j = 0; j < classes; ++j) post(i, j) = std::exp(logp[j] - mx) / z;
  }
  d.truth_pmf = std::move(post);
  return d;
}

Dataset synth_geo(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.family = Family::regression;
  d.feature_names = {"lat", "lon", "f0", "f1"};
  d.target_name = "yield";
  d.x = Array(n, 4);
  d.y.resize(n);
  d.groups.resize(n);
  GaussianForecasts truth;
  truth.mu.resize(n);
  truth.sigma.resize(n);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    const double lat = rng.uniform(), lon = rng.uniform();
    const double f0 = rng.uniform(-1.0, 1.0), f1 = rng.uniform(-1.0, 1.0);
    d.x(i, 0) = lat;
    d.x(i, 1) = lon;
    d.x(i, 2) = f0;
    d.x(i, 3) = f1;
    truth.mu[i] = std::sin(two_pi * lat) + std::cos(two_pi * lon) + 0.5 * f0;
    truth.sigma[i] = 0.1 + 0.4 * lat * lon;
    d.y[i] = truth.mu[i] + truth.sigma[i] * rng.normal();
    d.groups[i] = (lat > 0.5 ? 2 : 0) + (lon > 0.5 ? 1 : 0);
  }
  d.truth = std::move(truth);
  return d;
}

Dataset make_synthetic(const std::string& name, std::size_t n, std::size_t classes,
                       std::uint64_t seed) {
  if (name == "heteroscedastic") return synth_heteroscedastic(n, seed);
  if (name == "classification") return synth_classification(n, classes, seed);
  if (name == "geo") return synth_geo(n, seed);
  throw std::invalid_argument("dataset.synthetic.name: unknown generator '" + name +
                              "' (heteroscedastic, classification, geo)");
}

}  // namespace calikit
