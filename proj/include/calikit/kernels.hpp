#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>

#include <json.hpp>

#include "calikit/array.hpp"

namespace calikit {

enum class KernelKind { rbf, linear, moment, min, tanh_threshold, delta, scaled, product };

// Half-open column range [begin, end) of a kernel input.
struct Slice {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t width() const { return end - begin; }
  friend bool operator==(const Slice&, const Slice&) = default;
};

// Immutable kernel description. Copies share structure.
//
//   rbf            exp(-|u - v|^2 / (2 bw^2))
//   linear         <u, v>
//   moment         sum_k u_k v_k + u_k^2 v_k^2      features (y, y^2)
//   min            min(u, v) on [0, T], scalar inputs
//   tanh_threshold tanh(u - c) tanh(v - c), scalar inputs; PSD, not universal
//   delta          1{u == v}
//   scaled         alpha * inner(u, v)
//   product        left(u[ls], v[ls]) * right(u[rs], v[rs])
class KernelSpec {
 public:
  static KernelSpec rbf(double bandwidth);
  // RBF whose bandwidth is set later by the median heuristic.
  static KernelSpec rbf_median();
  static KernelSpec linear();
  static KernelSpec moment();
  static KernelSpec min(double upper);
  static KernelSpec tanh_threshold(double c);
  static KernelSpec delta();
  static KernelSpec scaled(double alpha, KernelSpec inner);
  static KernelSpec product(KernelSpec left, KernelSpec right, Slice left_slice,
                            Slice right_slice);

  KernelKind kind() const { return node_->kind; }
  // bandwidth (rbf), upper bound (min), c (tanh_threshold) or alpha (scaled).
  double param() const { return node_->param; }
  const KernelSpec& left() const;
  const KernelSpec& right() const;
  const KernelSpec& inner() const { return left(); }
  Slice left_slice() const { return node_->left_slice; }
  Slice right_slice() const { return node_->right_slice; }

  // False while any rbf factor still awaits a median-heuristic bandwidth.
  bool resolved() const;

  double eval(std::span<const double> u, std::span<const double> v) const;
  // Returns k(u, v) and adds weight * dk/du into du. Kernels are symmetric,
  // so dk/dv is obtained by swapping the arguments.
  double eval_grad(std::span<const double> u, std::span<const double> v, std::span<double> du,
                   double weight) const;

  nlohmann::json to_json() const;
  static KernelSpec from_json(const nlohmann::json& j);
  std::string describe() const;

 private:
  struct Node {
    KernelKind kind = KernelKind::linear;
    double param = 0.0;
    bool pending_bandwidth = false;
    std::shared_ptr<const KernelSpec> left;
    std::shared_ptr<const KernelSpec> right;
    Slice left_slice;
    Slice right_slice;
  };
  explicit KernelSpec(std::shared_ptr<const Node> node) : node_(std::move(node)) {}

  friend KernelSpec resolve_bandwidths(const KernelSpec& spec, const Array& samples);
  static KernelSpec resolve_range(const KernelSpec& spec, const Array& samples, Slice cols);

  std::shared_ptr<const Node> node_;
};

// Gram matrix G(i, j) = k(U_i, V_j). Rows are computed in parallel; each entry
// is evaluated independently, so the result does not depend on thread count.
Array gram(const KernelSpec& spec, const Array& u, const Array& v);

// Median pairwise Euclidean distance between rows; 1.0 if all rows coincide.
double median_bandwidth(const Array& samples);

// Replaces every pending rbf bandwidth with the median heuristic computed on
// the columns that factor sees.
KernelSpec resolve_bandwidths(const KernelSpec& spec, const Array& samples);

// True iff the smallest eigenvalue of the symmetric matrix is >= -tol * trace.
bool psd_check_matrix(const Array& g, double tol);
// PSD check of gram(spec, samples, samples). Requires at least two samples.
bool psd_check(const KernelSpec& spec, const Array& samples, double tol);

}  // namespace calikit
