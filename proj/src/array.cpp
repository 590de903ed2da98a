#include "calikit/array.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace calikit {

Array::Array(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  if (data_.size() != rows * cols) {
    throw std::invalid_argument("Array: " + std::to_string(data_.size()) +
                                " values do not fill shape " + shape_string());
  }
}

Array Array::column(std::span<const double> values) {
  return Array(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

Array Array::row(std::span<const double> values) {
  return Array(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Array Array::of(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Array(rows, cols, std::vector<double>(values));
}

std::string Array::shape_string() const {
  return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

double Array::item() const {
  if (rows_ != 1 || cols_ != 1) {
    throw std::logic_error("Array::item on non-scalar " + shape_string());
  }
  return data_[0];
}

void Array::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Array::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Array take_rows(const Array& a, std::span<const std::size_t> idx) {
  Array out(idx.size(), a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= a.rows()) throw std::out_of_range("take_rows: row index out of range");
    auto src = a.row_span(idx[r]);
    std::copy(src.begin(), src.end(), out.row_span(r).begin());
  }
  return out;
}

}  // namespace calikit
