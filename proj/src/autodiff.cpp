#include "calikit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace calikit {

namespace {

std::string node_label(const std::string& op, std::size_t id) {
  return "node #" + std::to_string(id) + " (" + op + ")";
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var Tape::push(std::string op, std::vector<std::size_t> parents, Array value,
               BackwardFn backward) {
  const std::size_t id = nodes_.size();
  grads_.emplace_back(value.rows(), value.cols(), 0.0);
  nodes_.push_back(Node{std::move(value), std::move(op), std::move(parents), std::move(backward)});
  return Var{id};
}

Var Tape::parameter(Array value, std::string name) {
  return push("param:" + name, {}, std::move(value), nullptr);
}

Var Tape::constant(Array value, std::string name) {
  return push(std::move(name), {}, std::move(value), nullptr);
}

Var Tape::custom(std::string op, std::vector<Var> parents, Array value, BackwardFn backward) {
  std::vector<std::size_t> ids;
  ids.reserve(parents.size());
  for (Var p : parents) {
    if (p.id >= nodes_.size()) {
      throw ShapeError(node_label(op, nodes_.size()) + ": unknown parent");
    }
    ids.push_back(p.id);
  }
  return push(std::move(op), std::move(ids), std::move(value), std::move(backward));
}

void Tape::backward(Var loss, double seed) {
  if (!grad_enabled_) throw std::logic_error("backward: tape was created without gradients");
  const Array& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ShapeError("backward: loss " + node_label(op(loss), loss.id) + " is not scalar but " +
                     lv.shape_string());
  }
  for (auto& g : grads_) g.fill(0.0);
  grads_[loss.id][0] = seed;

  std::vector<Array*> pg;
  for (std::size_t k = loss.id + 1; k-- > 0;) {
    Node& node = nodes_[k];
    if (!node.backward) continue;
    pg.clear();
    for (std::size_t p : node.parents) pg.push_back(&grads_[p]);
    node.backward(grads_[k], pg);
  }
  for (std::size_t k = 0; k <= loss.id; ++k) {
    if (!grads_[k].all_finite()) {
      throw NumericalError("backward: non-finite gradient at " + node_label(nodes_[k].op, k));
    }
  }
}

void Tape::require_same_shape(const char* op, Var a, Var b) const {
  if (!value(a).same_shape(value(b))) {
    throw ShapeError(node_label(op, nodes_.size()) + ": operand shapes " +
                     value(a).shape_string() + " and " + value(b).shape_string() + " differ");
  }
}

Var Tape::unary(const char* op, Var x, double (*f)(double), double (*df)(double, double)) {
  const Array& xv = value(x);
  Array out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xid = x.id;
  return push(op, {xid}, std::move(out),
              [this, xid, df](const Array& g, std::span<Array* const> pg) {
                const Array& in = nodes_[xid].value;
                Array& gx = *pg[0];
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(in[i], g[i]);
              });
}

Var Tape::affine(Var x, Var w, Var b) {
  const Array& xv = value(x);
  const Array& wv = value(w);
  const Array& bv = value(b);
  if (xv.cols() != wv.rows() || bv.rows() != 1 || bv.cols() != wv.cols()) {
    throw ShapeError(node_label("affine", nodes_.size()) + ": x" + xv.shape_string() + " W" +
                     wv.shape_string() + " b" + bv.shape_string());
  }
  const std::size_t n = xv.rows(), in = xv.cols(), out = wv.cols();
  Array y(n, out);
#pragma omp parallel for schedule(static) if (n * in * out > (1u << 16))
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t o = 0; o < out; ++o) y(r, o) = bv(0, o);
    for (std::size_t k = 0; k < in; ++k) {
      const double xk = xv(r, k);
      if (xk == 0.0) continue;
      for (std::size_t o = 0; o < out; ++o) y(r, o) += xk * wv(k, o);
    }
  }
  const std::size_t xid = x.id, wid = w.id;
  return push("affine", {x.id, w.id, b.id}, std::move(y),
              [this, xid, wid, n, in, out](const Array& g, std::span<Array* const> pg) {
                const Array& xv = nodes_[xid].value;
                const Array& wv = nodes_[wid].value;
                Array& gx = *pg[0];
                Array& gw = *pg[1];
                Array& gb = *pg[2];
#pragma omp parallel for schedule(static) if (n * in * out > (1u << 16))
                for (std::size_t r = 0; r < n; ++r) {
                  for (std::size_t k = 0; k < in; ++k) {
                    double acc = 0.0;
                    for (std::size_t o = 0; o < out; ++o) acc += g(r, o) * wv(k, o);
                    gx(r, k) += acc;
                  }
                }
#pragma omp parallel for schedule(static) if (n * in * out > (1u << 16))
                for (std::size_t k = 0; k < in; ++k) {
                  for (std::size_t r = 0; r < n; ++r) {
                    const double xk = xv(r, k);
                    if (xk == 0.0) continue;
                    for (std::size_t o = 0; o < out; ++o) gw(k, o) += xk * g(r, o);
                  }
                }
                for (std::size_t r = 0; r < n; ++r)
                  for (std::size_t o = 0; o < out; ++o) gb(0, o) += g(r, o);
              });
}

Var Tape::relu(Var x) {
  return unary(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var Tape::tanh(Var x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double v, double) {
        const double t = std::tanh(v);
        return 1.0 - t * t;
      });
}

Var Tape::softplus(Var x) {
  return unary(
      "softplus", x,
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return sigmoid(v); });
}

Var Tape::exp(Var x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double v, double) { return std::exp(v); });
}

Var Tape::log(Var x) {
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var Tape::square(Var x) {
  return unary(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var Tape::normal_cdf(Var x) {
  return unary(
      "normal_cdf", x, [](double v) { return 0.5 * std::erfc(-v * std::numbers::sqrt2 / 2.0); },
      [](double v, double) {
        return std::exp(-0.5 * v * v) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
      });
}

Var Tape::sum(Var x) {
  const Array& xv = value(x);
  double s = 0.0;
  for (double v : xv.flat()) s += v;
  return push("sum", {x.id}, Array::scalar(s), [](const Array& g, std::span<Array* const> pg) {
    const double gs = g[0];
    for (double& v : pg[0]->flat()) v += gs;
  });
}

Var Tape::mean(Var x) {
  const Array& xv = value(x);
  if (xv.size() == 0) throw ShapeError(node_label("mean", nodes_.size()) + ": empty input");
  double s = 0.0;
  for (double v : xv.flat()) s += v;
  const double inv = 1.0 / static_cast<double>(xv.size());
  return push("mean", {x.id}, Array::scalar(s * inv),
              [inv](const Array& g, std::span<Array* const> pg) {
                const double gs = g[0] * inv;
                for (double& v : pg[0]->flat()) v += gs;
              });
}

Var Tape::add(Var a, Var b) {
  require_same_shape("add", a, b);
  Array out = value(a);
  const Array& bv = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return push("add", {a.id, b.id}, std::move(out),
              [](const Array& g, std::span<Array* const> pg) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                  (*pg[0])[i] += g[i];
                  (*pg[1])[i] += g[i];
                }
              });
}

Var Tape::sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Array out = value(a);
  const Array& bv = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return push("sub", {a.id, b.id}, std::move(out),
              [](const Array& g, std::span<Array* const> pg) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                  (*pg[0])[i] += g[i];
                  (*pg[1])[i] -= g[i];
                }
              });
}

Var Tape::mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Array out = value(a);
  const Array& bv = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return push("mul", {a.id, b.id}, std::move(out),
              [this, aid, bid](const Array& g, std::span<Array* const> pg) {
                const Array& av = nodes_[aid].value;
                const Array& bv = nodes_[bid].value;
                for (std::size_t i = 0; i < g.size(); ++i) {
                  (*pg[0])[i] += g[i] * bv[i];
                  (*pg[1])[i] += g[i] * av[i];
                }
              });
}

Var Tape::div(Var a, Var b) {
  require_same_shape("div", a, b);
  Array out = value(a);
  const Array& bv = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return push("div", {a.id, b.id}, std::move(out),
              [this, aid, bid](const Array& g, std::span<Array* const> pg) {
                const Array& av = nodes_[aid].value;
                const Array& bv = nodes_[bid].value;
                for (std::size_t i = 0; i < g.size(); ++i) {
                  (*pg[0])[i] += g[i] / bv[i];
                  (*pg[1])[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
              });
}

Var Tape::scale(Var x, double alpha) {
  Array out = value(x);
  for (double& v : out.flat()) v *= alpha;
  return push("scale", {x.id}, std::move(out),
              [alpha](const Array& g, std::span<Array* const> pg) {
                for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += alpha * g[i];
              });
}

Var Tape::add_scalar(Var x, double c) {
  Array out = value(x);
  for (double& v : out.flat()) v += c;
  return push("add_scalar", {x.id}, std::move(out),
              [](const Array& g, std::span<Array* const> pg) {
                for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
              });
}

Var Tape::softmax(Var x) {
  const Array& xv = value(x);
  Array out(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto in = xv.row_span(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) z += std::exp(in[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < in.size(); ++c) out(r, c) = std::exp(in[c] - lse);
  }
  const std::size_t id = nodes_.size();
  return push("softmax", {x.id}, std::move(out),
              [this, id](const Array& g, std::span<Array* const> pg) {
                const Array& s = nodes_[id].value;
                Array& gx = *pg[0];
                for (std::size_t r = 0; r < s.rows(); ++r) {
                  double dot = 0.0;
                  for (std::size_t c = 0; c < s.cols(); ++c) dot += g(r, c) * s(r, c);
                  for (std::size_t c = 0; c < s.cols(); ++c) gx(r, c) += s(r, c) * (g(r, c) - dot);
                }
              });
}

Var Tape::log_softmax(Var x) {
  const Array& xv = value(x);
  Array out(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto in = xv.row_span(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) z += std::exp(in[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < in.size(); ++c) out(r, c) = in[c] - lse;
  }
  const std::size_t id = nodes_.size();
  return push("log_softmax", {x.id}, std::move(out),
              [this, id](const Array& g, std::span<Array* const> pg) {
                const Array& ls = nodes_[id].value;
                Array& gx = *pg[0];
                for (std::size_t r = 0; r < ls.rows(); ++r) {
                  double gs = 0.0;
                  for (std::size_t c = 0; c < ls.cols(); ++c) gs += g(r, c);
                  for (std::size_t c = 0; c < ls.cols(); ++c)
                    gx(r, c) += g(r, c) - std::exp(ls(r, c)) * gs;
                }
              });
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError(node_label("concat", nodes_.size()) + ": no inputs");
  const std::size_t n = value(parts[0]).rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids, offsets;
  for (Var p : parts) {
    if (value(p).rows() != n) {
      throw ShapeError(node_label("concat", nodes_.size()) + ": row counts differ (" +
                       std::to_string(n) + " vs " + std::to_string(value(p).rows()) + ")");
    }
    ids.push_back(p.id);
    offsets.push_back(total);
    total += value(p).cols();
  }
  Array out(n, total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Array& pv = value(parts[k]);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < pv.cols(); ++c) out(r, offsets[k] + c) = pv(r, c);
  }
  return push("concat", ids, std::move(out),
              [offsets](const Array& g, std::span<Array* const> pg) {
                for (std::size_t k = 0; k < pg.size(); ++k) {
                  Array& gp = *pg[k];
                  for (std::size_t r = 0; r < gp.rows(); ++r)
                    for (std::size_t c = 0; c < gp.cols(); ++c) gp(r, c) += g(r, offsets[k] + c);
                }
              });
}

Var Tape::slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Array& xv = value(x);
  if (begin >= end || end > xv.cols()) {
    throw ShapeError(node_label("slice_cols", nodes_.size()) + ": columns [" +
                     std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                     xv.shape_string());
  }
  Array out(xv.rows(), end - begin);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = xv(r, c);
  return push("slice_cols", {x.id}, std::move(out),
              [begin](const Array& g, std::span<Array* const> pg) {
                for (std::size_t r = 0; r < g.rows(); ++r)
                  for (std::size_t c = 0; c < g.cols(); ++c) (*pg[0])(r, begin + c) += g(r, c);
              });
}

Var Tape::repeat_rows(Var x, std::size_t times) {
  const Array& xv = value(x);
  if (times == 0) throw ShapeError(node_label("repeat_rows", nodes_.size()) + ": zero repeats");
  Array out(xv.rows() * times, xv.cols());
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < xv.cols(); ++c) out(r, c) = xv(r / times, c);
  return push("repeat_rows", {x.id}, std::move(out),
              [times](const Array& g, std::span<Array* const> pg) {
                for (std::size_t r = 0; r < g.rows(); ++r)
                  for (std::size_t c = 0; c < g.cols(); ++c) (*pg[0])(r / times, c) += g(r, c);
              });
}

Var Tape::pick(Var x, std::span<const std::size_t> index) {
  const Array& xv = value(x);
  if (index.size() != xv.rows()) {
    throw ShapeError(node_label("pick", nodes_.size()) + ": " + std::to_string(index.size()) +
                     " indices for " + xv.shape_string());
  }
  Array out(xv.rows(), 1);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    if (index[r] >= xv.cols()) {
      throw ShapeError(node_label("pick", nodes_.size()) + ": column index out of range");
    }
    out(r, 0) = xv(r, index[r]);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return push("pick", {x.id}, std::move(out),
              [idx = std::move(idx)](const Array& g, std::span<Array* const> pg) {
                for (std::size_t r = 0; r < idx.size(); ++r) (*pg[0])(r, idx[r]) += g(r, 0);
              });
}

double gradcheck(const GraphFn& fn, std::span<const Array> point, double eps) {
  std::vector<Array> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (std::size_t k = 0; k < point.size(); ++k)
      leaves.push_back(tape.parameter(point[k], "x" + std::to_string(k)));
    Var loss = fn(tape, leaves);
    tape.backward(loss);
    for (Var v : leaves) analytic.push_back(tape.grad(v));
  }

  auto evaluate = [&](const std::vector<Array>& at) {
    Tape tape;
    std::vector<Var> leaves;
    for (std::size_t k = 0; k < at.size(); ++k)
      leaves.push_back(tape.constant(at[k], "x" + std::to_string(k)));
    return tape.value(fn(tape, leaves)).item();
  };

  std::vector<Array> work(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (std::size_t i = 0; i < work[k].size(); ++i) {
      const double orig = work[k][i];
      work[k][i] = orig + eps;
      const double up = evaluate(work);
      work[k][i] = orig - eps;
      const double down = evaluate(work);
      work[k][i] = orig;
      const double central = (up - down) / (2.0 * eps);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12));
    }
  }
  return worst;
}

}  // namespace calikit
