#include "calikit/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "calikit/parallel.hpp"

namespace calikit {

using nlohmann::json;

namespace {

void require_dims(const char* name, std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw std::invalid_argument(std::string("kernel ") + name + ": input dimensions " +
                                std::to_string(u.size()) + " and " + std::to_string(v.size()) +
                                " differ");
  }
}

void require_scalar(const char* name, std::span<const double> u) {
  if (u.size() != 1) {
    throw std::invalid_argument(std::string("kernel ") + name + " takes scalar inputs, got " +
                                std::to_string(u.size()) + " dimensions");
  }
}

void require_slice(Slice s, std::size_t dim) {
  if (s.begin >= s.end || s.end > dim) {
    throw std::invalid_argument("kernel product: slice [" + std::to_string(s.begin) + "," +
                                std::to_string(s.end) + ") outside input of dimension " +
                                std::to_string(dim));
  }
}

const char* kind_name(KernelKind k) {
  switch (k) {
    case KernelKind::rbf: return "rbf";
    case KernelKind::linear: return "linear";
    case KernelKind::moment: return "moment";
    case KernelKind::min: return "min";
    case KernelKind::tanh_threshold: return "tanh_threshold";
    case KernelKind::delta: return "delta";
    case KernelKind::scaled: return "scaled";
    case KernelKind::product: return "product";
  }
  return "?";
}

}  // namespace

KernelSpec KernelSpec::rbf(double bandwidth) {
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
    throw std::invalid_argument("kernel rbf: bandwidth must be positive, got " +
                                std::to_string(bandwidth));
  }
  return KernelSpec(std::make_shared<const Node>(Node{KernelKind::rbf, bandwidth, false, {}, {}, {}, {}}));
}

KernelSpec KernelSpec::rbf_median() {
  return KernelSpec(std::make_shared<const Node>(Node{KernelKind::rbf, 0.0, true, {}, {}, {}, {}}));
}

KernelSpec KernelSpec::linear() {
  return KernelSpec(std::make_shared<const Node>(Node{KernelKind::linear, 0.0, false, {}, {}, {}, {}}));
}

KernelSpec KernelSpec::moment() {
  return KernelSpec(std::make_shared<const Node>(Node{KernelKind::moment, 0.0, false, {}, {}, {}, {}}));
}

KernelSpec KernelSpec::min(double upper) {
  if (!(upper > 0.0)) throw std::invalid_argument("kernel min: upper bound T must be positive");
  return KernelSpec(std::make_shared<const Node>(Node{KernelKind::min, upper, false, {}, {}, {}, {}}));
}

KernelSpec KernelSpec::tanh_threshold(double c) {
  if (!std::isfinite(c)) throw std::invalid_argument("kernel tanh_threshold: c must be finite");
  return KernelSpec(
      std::make_shared<const Node>(Node{KernelKind::tanh_threshold, c, false, {}, {}, {}, {}}));
}

KernelSpec KernelSpec::delta() {
  return KernelSpec(std::make_shared<const Node>(Node{KernelKind::delta, 0.0, false, {}, {}, {}, {}}));
}

KernelSpec KernelSpec::scaled(double alpha, KernelSpec inner) {
  if (!(alpha > 0.0)) throw std::invalid_argument("kernel scaled: alpha must be positive");
  return KernelSpec(std::make_shared<const Node>(
      Node{KernelKind::scaled, alpha, false, std::make_shared<const KernelSpec>(std::move(inner)),
           {}, {}, {}}));
}

KernelSpec KernelSpec::product(KernelSpec left, KernelSpec right, Slice left_slice,
                               Slice right_slice) {
  if (left_slice.begin >= left_slice.end || right_slice.begin >= right_slice.end) {
    throw std::invalid_argument("kernel product: empty slice");
  }
  return KernelSpec(std::make_shared<const Node>(
      Node{KernelKind::product, 0.0, false, std::make_shared<const KernelSpec>(std::move(left)),
           std::make_shared<const KernelSpec>(std::move(right)), left_slice, right_slice}));
}

const KernelSpec& KernelSpec::left() const {
  if (!node_->left) throw std::logic_error("kernel " + describe() + " has no inner kernel");
  return *node_->left;
}

const KernelSpec& KernelSpec::right() const {
  if (!node_->right) throw std::logic_error("kernel " + describe() + " has no right factor");
  return *node_->right;
}

bool KernelSpec::resolved() const {
  switch (kind()) {
    case KernelKind::rbf: return !node_->pending_bandwidth;
    case KernelKind::scaled: return inner().resolved();
    case KernelKind::product: return left().resolved() && right().resolved();
    default: return true;
  }
}

double KernelSpec::eval(std::span<const double> u, std::span<const double> v) const {
  switch (kind()) {
    case KernelKind::rbf: {
      require_dims("rbf", u, v);
      if (node_->pending_bandwidth) {
        throw std::logic_error("kernel rbf: bandwidth not resolved (median heuristic pending)");
      }
      double d2 = 0.0;
      for (std::size_t k = 0; k < u.size(); ++k) d2 += (u[k] - v[k]) * (u[k] - v[k]);
      return std::exp(-d2 / (2.0 * param() * param()));
    }
    case KernelKind::linear: {
      require_dims("linear", u, v);
      double s = 0.0;
      for (std::size_t k = 0; k < u.size(); ++k) s += u[k] * v[k];
      return s;
    }
    case KernelKind::moment: {
      require_dims("moment", u, v);
      double s = 0.0;
      for (std::size_t k = 0; k < u.size(); ++k) s += u[k] * v[k] + u[k] * u[k] * v[k] * v[k];
      return s;
    }
    case KernelKind::min: {
      require_dims("min", u, v);
      require_scalar("min", u);
      const double t = param();
      if (u[0] < 0.0 || u[0] > t || v[0] < 0.0 || v[0] > t) {
        throw std::domain_error("kernel min: input outside [0, " + std::to_string(t) + "]");
      }
      return std::min(u[0], v[0]);
    }
    case KernelKind::tanh_threshold: {
      require_dims("tanh_threshold", u, v);
      require_scalar("tanh_threshold", u);
      return std::tanh(u[0] - param()) * std::tanh(v[0] - param());
    }
    case KernelKind::delta: {
      require_dims("delta", u, v);
      return std::equal(u.begin(), u.end(), v.begin()) ? 1.0 : 0.0;
    }
    case KernelKind::scaled:
      return param() * inner().eval(u, v);
    case KernelKind::product: {
      require_dims("product", u, v);
      const Slice ls = left_slice(), rs = right_slice();
      require_slice(ls, u.size());
      require_slice(rs, u.size());
      return left().eval(u.subspan(ls.begin, ls.width()), v.subspan(ls.begin, ls.width())) *
             right().eval(u.subspan(rs.begin, rs.width()), v.subspan(rs.begin, rs.width()));
    }
  }
  return 0.0;
}

double KernelSpec::eval_grad(std::span<const double> u, std::span<const double> v,
                             std::span<double> du, double weight) const {
  switch (kind()) {
    case KernelKind::rbf: {
      const double k = eval(u, v);
      const double f = -weight * k / (param() * param());
      for (std::size_t d = 0; d < u.size(); ++d) du[d] += f * (u[d] - v[d]);
      return k;
    }
    case KernelKind::linear: {
      const double k = eval(u, v);
      for (std::size_t d = 0; d < u.size(); ++d) du[d] += weight * v[d];
      return k;
    }
    case KernelKind::moment: {
      const double k = eval(u, v);
      for (std::size_t d = 0; d < u.size(); ++d)
        du[d] += weight * (v[d] + 2.0 * u[d] * v[d] * v[d]);
      return k;
    }
    case KernelKind::min: {
      const double k = eval(u, v);
      // Subgradient; the tie value keeps d/du + d/dv = 1 on the diagonal.
      du[0] += weight * (u[0] < v[0] ? 1.0 : (u[0] == v[0] ? 0.5 : 0.0));
      return k;
    }
    case KernelKind::tanh_threshold: {
      require_dims("tanh_threshold", u, v);
      require_scalar("tanh_threshold", u);
      const double tu = std::tanh(u[0] - param());
      const double tv = std::tanh(v[0] - param());
      du[0] += weight * (1.0 - tu * tu) * tv;
      return tu * tv;
    }
    case KernelKind::delta:
      return eval(u, v);
    case KernelKind::scaled:
      return param() * inner().eval_grad(u, v, du, weight * param());
    case KernelKind::product: {
      require_dims("product", u, v);
      const Slice ls = left_slice(), rs = right_slice();
      require_slice(ls, u.size());
      require_slice(rs, u.size());
      auto ul = u.subspan(ls.begin, ls.width()), vl = v.subspan(ls.begin, ls.width());
      auto ur = u.subspan(rs.begin, rs.width()), vr = v.subspan(rs.begin, rs.width());
      const double kl = left().eval(ul, vl);
      const double kr = right().eval(ur, vr);
      if (kr != 0.0) left().eval_grad(ul, vl, du.subspan(ls.begin, ls.width()), weight * kr);
      if (kl != 0.0) right().eval_grad(ur, vr, du.subspan(rs.begin, rs.width()), weight * kl);
      return kl * kr;
    }
  }
  return 0.0;
}

json KernelSpec::to_json() const {
  json j;
  j["variant"] = kind_name(kind());
  switch (kind()) {
    case KernelKind::rbf:
      if (node_->pending_bandwidth) {
        j["bandwidth"] = "median";
      } else {
        j["bandwidth"] = param();
      }
      break;
    case KernelKind::min: j["upper"] = param(); break;
    case KernelKind::tanh_threshold: j["c"] = param(); break;
    case KernelKind::scaled:
      j["alpha"] = param();
      j["inner"] = inner().to_json();
      break;
    case KernelKind::product:
      j["left"] = left().to_json();
      j["right"] = right().to_json();
      j["left_slice"] = {left_slice().begin, left_slice().end};
      j["right_slice"] = {right_slice().begin, right_slice().end};
      break;
    default: break;
  }
  return j;
}

KernelSpec KernelSpec::from_json(const json& j) {
  if (!j.is_object() || !j.contains("variant") || !j["variant"].is_string()) {
    throw std::invalid_argument("kernel: expected an object with a string \"variant\"");
  }
  const std::string v = j["variant"];
  auto number = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_number()) {
      throw std::invalid_argument("kernel " + v + ": missing numeric \"" + key + "\"");
    }
    return j[key].get<double>();
  };
  auto slice = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_array() || j[key].size() != 2) {
      throw std::invalid_argument("kernel product: \"" + std::string(key) +
                                  "\" must be [begin, end]");
    }
    return Slice{j[key][0].get<std::size_t>(), j[key][1].get<std::size_t>()};
  };
  if (v == "rbf") {
    if (!j.contains("bandwidth") || j["bandwidth"] == "median") return rbf_median();
    return rbf(number("bandwidth"));
  }
  if (v == "linear") return linear();
  if (v == "moment") return moment();
  if (v == "min") return min(number("upper"));
  if (v == "tanh_threshold") return tanh_threshold(number("c"));
  if (v == "delta") return delta();
  if (v == "scaled") {
    if (!j.contains("inner")) throw std::invalid_argument("kernel scaled: missing \"inner\"");
    return scaled(number("alpha"), from_json(j["inner"]));
  }
  if (v == "product") {
    if (!j.contains("left") || !j.contains("right")) {
      throw std::invalid_argument("kernel product: missing \"left\" or \"right\"");
    }
    return product(from_json(j["left"]), from_json(j["right"]), slice("left_slice"),
                   slice("right_slice"));
  }
  throw std::invalid_argument("kernel: unknown variant \"" + v + "\"");
}

std::string KernelSpec::describe() const { return to_json().dump(); }

KernelSpec KernelSpec::resolve_range(const KernelSpec& spec, const Array& samples, Slice cols) {
  switch (spec.kind()) {
    case KernelKind::rbf: {
      if (!spec.node_->pending_bandwidth) return spec;
      Array sub(samples.rows(), cols.width());
      for (std::size_t r = 0; r < samples.rows(); ++r)
        for (std::size_t c = 0; c < cols.width(); ++c) sub(r, c) = samples(r, cols.begin + c);
      return rbf(median_bandwidth(sub));
    }
    case KernelKind::scaled:
      return scaled(spec.param(), resolve_range(spec.inner(), samples, cols));
    case KernelKind::product: {
      const Slice ls{cols.begin + spec.left_slice().begin, cols.begin + spec.left_slice().end};
      const Slice rs{cols.begin + spec.right_slice().begin, cols.begin + spec.right_slice().end};
      require_slice(ls, samples.cols());
      require_slice(rs, samples.cols());
      return product(resolve_range(spec.left(), samples, ls),
                     resolve_range(spec.right(), samples, rs), spec.left_slice(),
                     spec.right_slice());
    }
    default:
      return spec;
  }
}

KernelSpec resolve_bandwidths(const KernelSpec& spec, const Array& samples) {
  return KernelSpec::resolve_range(spec, samples, Slice{0, samples.cols()});
}

double median_bandwidth(const Array& samples) {
  std::vector<double> dist;
  const std::size_t n = samples.rows();
  dist.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < samples.cols(); ++c) {
        const double d = samples(i, c) - samples(j, c);
        d2 += d * d;
      }
      dist.push_back(std::sqrt(d2));
    }
  }
  if (dist.empty()) return 1.0;
  auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  double med = *mid;
  if (dist.size() % 2 == 0) {
    med = 0.5 * (med + *std::max_element(dist.begin(), mid));
  }
  return med > 0.0 ? med : 1.0;
}

Array gram(const KernelSpec& spec, const Array& u, const Array& v) {
  if (u.cols() != v.cols()) {
    throw std::invalid_argument("gram: column counts " + std::to_string(u.cols()) + " and " +
                                std::to_string(v.cols()) + " differ");
  }
  Array g(u.rows(), v.rows());
  parallel_rows(u.rows(), [&](std::size_t i) {
    auto ui = u.row_span(i);
    for (std::size_t j = 0; j < v.rows(); ++j) g(i, j) = spec.eval(ui, v.row_span(j));
  });
  return g;
}

bool psd_check_matrix(const Array& g, double tol) {
  if (g.rows() != g.cols()) throw std::invalid_argument("psd_check: matrix is not square");
  const auto n = static_cast<Eigen::Index>(g.rows());
  Eigen::MatrixXd m(n, n);
  double trace = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j)
      m(i, j) = g(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
    trace += m(i, i);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) return false;
  return solver.eigenvalues().minCoeff() >= -tol * std::abs(trace);
}

bool psd_check(const KernelSpec& spec, const Array& samples, double tol) {
  if (samples.rows() < 2) throw std::invalid_argument("psd_check: need at least two samples");
  return psd_check_matrix(gram(spec, samples, samples), tol);
}

}  // namespace calikit
