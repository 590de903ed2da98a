#pragma once

// Reverse-mode differentiation over dense double arrays.
//
// A Tape records nodes in creation order, which is a topological order since
// every op only references nodes that already exist. Values are computed
// eagerly when an op is recorded; backward() walks the tape in reverse.

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "calikit/array.hpp"

namespace calikit {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Var {
  std::size_t id = 0;
};

class Tape {
 public:
  // With grad_enabled false, fused ops skip computing their local gradients;
  // backward() is then unavailable.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  // Backward rules refer back into the tape, so it stays put.
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Accumulates the contribution of out_grad into the parents' gradients.
  // parent_grads[k] corresponds to the k-th parent passed to custom().
  using BackwardFn =
      std::function<void(const Array& out_grad, std::span<Array* const> parent_grads)>;

  Var parameter(Array value, std::string name);
  Var constant(Array value, std::string name = "const");

  const Array& value(Var v) const { return nodes_.at(v.id).value; }
  const Array& grad(Var v) const { return grads_.at(v.id); }
  const std::string& op(Var v) const { return nodes_.at(v.id).op; }
  const std::vector<std::size_t>& parents(Var v) const { return nodes_.at(v.id).parents; }
  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  // Runs reverse accumulation from a scalar loss. `seed` is d(output)/d(loss).
  void backward(Var loss, double seed = 1.0);

  // Records an op with a caller-provided value and backward rule.
  Var custom(std::string op, std::vector<Var> parents, Array value, BackwardFn backward);

  // n x i times i x o plus a 1 x o bias row.
  Var affine(Var x, Var w, Var b);
  Var relu(Var x);
  Var tanh(Var x);
  Var softplus(Var x);
  Var exp(Var x);
  Var log(Var x);
  Var square(Var x);
  Var sum(Var x);
  Var mean(Var x);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var scale(Var x, double alpha);
  Var add_scalar(Var x, double c);
  // Row-wise softmax and log-softmax, stabilised by subtracting the row max.
  Var softmax(Var x);
  Var log_softmax(Var x);
  Var concat_cols(std::span<const Var> parts);
  Var slice_cols(Var x, std::size_t begin, std::size_t end);
  // Row i of the result is row (i / times) of x.
  Var repeat_rows(Var x, std::size_t times);
  // out(i, 0) = x(i, index[i]).
  Var pick(Var x, std::span<const std::size_t> index);
  // Standard normal cdf, elementwise.
  Var normal_cdf(Var x);

 private:
  struct Node {
    Array value;
    std::string op;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };

  Var push(std::string op, std::vector<std::size_t> parents, Array value, BackwardFn backward);
  void require_same_shape(const char* op, Var a, Var b) const;
  Var unary(const char* op, Var x, double (*f)(double), double (*df)(double, double));

  bool grad_enabled_ = true;
  std::vector<Node> nodes_;
  std::vector<Array> grads_;
};

using GraphFn = std::function<Var(Tape&, std::span<const Var>)>;

// Max over all coordinates of |analytic - central| / (|analytic| + |central| + 1e-12).
double gradcheck(const GraphFn& fn, std::span<const Array> point, double eps = 1e-6);

}  // namespace calikit
