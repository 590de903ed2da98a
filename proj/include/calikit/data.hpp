#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calikit/array.hpp"
#include "calikit/caltasks.hpp"
#include "calikit/forecast.hpp"

namespace calikit {

// Tabular data. Regression labels are real; classification labels are class
// indices 0..classes-1 stored as doubles.
struct Dataset {
  Family family = Family::regression;
  Array x;
  std::vector<double> y;
  std::vector<std::string> feature_names;
  std::string target_name;
  std::size_t classes = 0;
  std::vector<std::string> class_names;
  // Group ids, empty when no group column exists.
  std::vector<int> groups;
  std::size_t dropped_rows = 0;
  // Ground-truth conditionals, available for synthetic data only.
  std::optional<GaussianForecasts> truth;
  std::optional<Array> truth_pmf;

  std::size_t size() const { return y.size(); }
  std::vector<std::size_t> class_labels() const;
  // Index of a named feature; throws std::invalid_argument naming it.
  std::size_t feature_index(const std::string& name) const;
};

// Rows `idx` of every per-example field, in order.
Dataset subset(const Dataset& d, std::span<const std::size_t> idx);

// Reads a header-led, comma-separated file. A column is numeric when most of
// its non-empty cells parse as numbers; other feature columns are one-hot
// encoded with categories in lexicographic order. Rows with an unparseable or
// non-finite numeric cell are dropped and counted. `group_column`, when
// non-empty, is taken out of the features and mapped to group ids.
Dataset load_csv(const std::string& path, const std::string& target, Family family,
                 const std::string& group_column = "");

// Per-column affine standardisation. Constant columns keep std 1.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> std;

  static Standardizer fit(const Array& x);
  static Standardizer fit(std::span<const double> v);
  Array apply(const Array& x) const;
  double apply(double v, std::size_t col = 0) const { return (v - mean[col]) / std[col]; }
  double invert(double v, std::size_t col = 0) const { return v * std[col] + mean[col]; }
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

// floor(0.7n) / floor(0.1n) / rest of a seeded Fisher-Yates permutation.
SplitIndices split_indices(std::size_t n, std::uint64_t seed);

// x ~ U[-2, 2]^4, y = sin(2 x1) + 0.5 x2 + eps, eps ~ N(0, (0.1 + 0.4 |x1|)^2).
// Group is 1{x1 > 0}.
Dataset synth_heteroscedastic(std::size_t n, std::uint64_t seed);

// Isotropic Gaussian clusters in 4 dimensions with class priors proportional
// to k + 1. Centres sit on a circle of radius 2 in the first two coordinates;
// `spread` is the cluster standard deviation and controls overlap. Group is
// 1{x1 > 0}.
Dataset synth_classification(std::size_t n, std::size_t classes, std::uint64_t seed,
                             double spread = 1.0);

// Columns lat, lon in [0, 1]^2 and f0, f1 ~ U[-1, 1];
// y = sin(2 pi lat) + cos(2 pi lon) + 0.5 f0 + eps with noise scale
// 0.1 + 0.4 lat lon that varies smoothly with location. Group is the lat/lon
// quadrant.
Dataset synth_geo(std::size_t n, std::uint64_t seed);

// Synthetic dataset by name: "heteroscedastic", "classification" or "geo".
Dataset make_synthetic(const std::string& name, std::size_t n, std::size_t classes,
                       std::uint64_t seed);

}  // namespace calikit
