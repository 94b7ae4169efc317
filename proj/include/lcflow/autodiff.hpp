#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "lcflow/tensor.hpp"

namespace lcflow {

// Trainable tensor. `grad` is scratch space written by backward(); it is
// mutable so that graphs built from a const model can still report gradients.
struct Parameter {
  Parameter() = default;
  Parameter(std::uint64_t id_, Tensor value_) : id(id_), value(std::move(value_)), grad(value.shape()) {}

  std::uint64_t id = 0;
  Tensor value;
  mutable Tensor grad;
};

namespace detail {
struct Node;
}

// Handle to a node of a define-by-run computation graph. Graphs are rebuilt
// on every forward pass and own their intermediate values.
class Var {
 public:
  Var() = default;

  static Var constant(Tensor value);
  // Leaf bound to a parameter; backward() writes the parameter's gradient.
  static Var param(const Parameter& p);

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const { return node_ != nullptr; }

  // Internal: builds an op node. `backward` receives the node's gradient and
  // must accumulate into the parents via accumulate_grad().
  using BackwardFn = std::function<void(const Tensor& grad_out, std::span<const Var> parents)>;
  static Var make(Tensor value, std::vector<Var> parents, BackwardFn backward);
  static void accumulate_grad(const Var& v, const Tensor& g);

 private:
  friend void backward(const Var& root);
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

Var elementwise(BinaryOp op, const Var& a, const Var& b);
Var elementwise(BinaryOp op, const Var& a, double b);
Var elementwise(UnaryOp op, const Var& a);

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator+(const Var& a, double b);
Var operator-(const Var& a, double b);
Var operator*(const Var& a, double b);
Var operator/(const Var& a, double b);
Var operator*(double a, const Var& b);
Var operator-(const Var& a);

Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reduce_sum(const Var& a, std::span<const std::size_t> axes);
Var reduce_sum_all(const Var& a);
Var reshape(const Var& a, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end);
Var gather(const Var& a, std::size_t axis, std::span<const std::size_t> index);

// Reverse sweep from a scalar root. Resets and then fills the gradient of
// every reachable node and parameter, so repeated calls agree exactly.
void backward(const Var& root);

// Central-difference check of d f / d params. Returns the largest
//   |analytic - fd| / max(|analytic|, |fd|, 1e-8)
// over all coordinates of all parameters.
double grad_check(const std::function<Var()>& f, std::span<Parameter* const> params,
                  double eps = 1e-5);

}  // namespace lcflow
