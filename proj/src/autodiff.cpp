#include "lcflow/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "lcflow/errors.hpp"

namespace lcflow {

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<Var> parents;
  Var::BackwardFn backward;
  const Parameter* param = nullptr;
};

}  // namespace detail

namespace {

// a * b^T without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out({m, n});
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = ap + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* br = bp + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out[i * n + j] = s;
    }
  }
  return out;
}

// a^T * b without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  double* op = out.data().data();
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* br = bp + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[p * m + i];
      if (av == 0.0) continue;
      double* orow = op + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * br[j];
    }
  }
  return out;
}

// Reduces a gradient to the shape of a (possibly rank-0) operand.
Tensor reduce_to(const Tensor& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  return reduce_sum_all(g);
}

Tensor map2(const Tensor& a, const Tensor& b, double (*f)(double, double)) {
  Tensor out = a;
  auto bd = b.data();
  auto od = out.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = f(od[i], bd[i]);
  } else {
    const double bv = b.item();
    for (auto& v : od) v = f(v, bv);
  }
  return out;
}

// Expands `g` (shape of a reduced tensor) back over the reduced axes.
Tensor expand_reduced(const Tensor& g, const Shape& in_shape, const std::vector<bool>& reduced) {
  Tensor out(in_shape);
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> out_stride(r, 0);
  std::size_t stride = 1;
  for (std::size_t i = r; i-- > 0;) {
    if (!reduced[i]) {
      out_stride[i] = stride;
      stride *= in_shape[i];
    }
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < out.numel(); ++flat) {
    out[flat] = g[off];
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += out_stride[d];
      if (idx[d] < in_shape[d]) break;
      off -= out_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return out;
}

}  // namespace

Var Var::constant(Tensor value) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var Var::param(const Parameter& p) {
  auto n = std::make_shared<detail::Node>();
  n->value = p.value;
  n->requires_grad = true;
  n->param = &p;
  return Var(std::move(n));
}

const Tensor& Var::value() const { return node_->value; }

const Tensor& Var::grad() const {
  if (!node_->has_grad) node_->grad = Tensor(node_->value.shape(), 0.0), node_->has_grad = true;
  return node_->grad;
}

bool Var::requires_grad() const { return node_->requires_grad; }

Var Var::make(Tensor value, std::vector<Var> parents, BackwardFn backward) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  n->requires_grad = std::any_of(parents.begin(), parents.end(),
                                 [](const Var& p) { return p.requires_grad(); });
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

void Var::accumulate_grad(const Var& v, const Tensor& g) {
  auto& n = *v.node_;
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape()) {
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value " +
                     shape_str(n.value.shape()));
  }
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    auto d = n.grad.data();
    auto s = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  }
}

void backward(const Var& root) {
  if (!root.valid()) throw InvalidArgumentError("backward on empty Var");
  if (root.value().numel() != 1) {
    throw ShapeError("backward requires a scalar root, got " + shape_str(root.shape()));
  }
  // Iterative post-order DFS; parent order fixes the traversal.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node_.get(), 0);
  seen.insert(root.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].node_.get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    n->has_grad = false;
    if (n->param) n->param->grad = Tensor(n->param->value.shape(), 0.0);
  }
  if (!root.node_->requires_grad) return;

  root.node_->grad = Tensor(root.value().shape(), 1.0);
  root.node_->has_grad = true;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->has_grad) continue;
    if (n->backward) n->backward(n->grad, n->parents);
    if (n->param) {
      auto d = n->param->grad.data();
      auto s = n->grad.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Ops

Var elementwise(BinaryOp op, const Var& a, const Var& b) {
  Tensor out = elementwise(op, a.value(), b.value());
  return Var::make(std::move(out), {a, b}, [op](const Tensor& g, std::span<const Var> p) {
    const Tensor& av = p[0].value();
    const Tensor& bv = p[1].value();
    const auto mul = [](double x, double y) { return x * y; };
    const auto div = [](double x, double y) { return x / y; };
    switch (op) {
      case BinaryOp::add:
        Var::accumulate_grad(p[0], reduce_to(g, av.shape()));
        Var::accumulate_grad(p[1], reduce_to(g, bv.shape()));
        break;
      case BinaryOp::sub:
        Var::accumulate_grad(p[0], reduce_to(g, av.shape()));
        Var::accumulate_grad(p[1], reduce_to(map2(g, Tensor::scalar(-1.0), mul), bv.shape()));
        break;
      case BinaryOp::mul: {
        if (p[0].requires_grad()) {
          Var::accumulate_grad(p[0], reduce_to(map2(g, bv, mul), av.shape()));
        }
        if (p[1].requires_grad()) {
          Var::accumulate_grad(p[1], reduce_to(map2(g, av, mul), bv.shape()));
        }
        break;
      }
      case BinaryOp::div: {
        Tensor ga = map2(g, bv, div);
        if (p[0].requires_grad()) Var::accumulate_grad(p[0], reduce_to(ga, av.shape()));
        if (p[1].requires_grad()) {
          // d(a/b)/db = -a/b^2
          Tensor gb = g;
          for (std::size_t i = 0; i < gb.numel(); ++i) {
            const double ai = av.rank() == 0 ? av[0] : av[i];
            const double bi = bv.rank() == 0 ? bv[0] : bv[i];
            gb[i] = -gb[i] * ai / (bi * bi);
          }
          Var::accumulate_grad(p[1], reduce_to(gb, bv.shape()));
        }
        break;
      }
    }
  });
}

Var elementwise(BinaryOp op, const Var& a, double b) {
  return elementwise(op, a, Var::constant(Tensor::scalar(b)));
}

Var elementwise(UnaryOp op, const Var& a) {
  Tensor out = elementwise(op, a.value());
  Tensor y = out;
  return Var::make(std::move(out), {a}, [op, y = std::move(y)](const Tensor& g, std::span<const Var> p) {
    Tensor d = g;
    auto dd = d.data();
    auto yd = y.data();
    auto xd = p[0].value().data();
    switch (op) {
      case UnaryOp::exp:
        for (std::size_t i = 0; i < dd.size(); ++i) dd[i] *= yd[i];
        break;
      case UnaryOp::log:
        for (std::size_t i = 0; i < dd.size(); ++i) dd[i] /= xd[i];
        break;
      case UnaryOp::tanh:
        for (std::size_t i = 0; i < dd.size(); ++i) dd[i] *= 1.0 - yd[i] * yd[i];
        break;
      case UnaryOp::sigmoid:
        for (std::size_t i = 0; i < dd.size(); ++i) dd[i] *= yd[i] * (1.0 - yd[i]);
        break;
      case UnaryOp::neg:
        for (auto& v : dd) v = -v;
        break;
    }
    Var::accumulate_grad(p[0], d);
  });
}

Var operator+(const Var& a, const Var& b) { return elementwise(BinaryOp::add, a, b); }
Var operator-(const Var& a, const Var& b) { return elementwise(BinaryOp::sub, a, b); }
Var operator*(const Var& a, const Var& b) { return elementwise(BinaryOp::mul, a, b); }
Var operator/(const Var& a, const Var& b) { return elementwise(BinaryOp::div, a, b); }
Var operator+(const Var& a, double b) { return elementwise(BinaryOp::add, a, b); }
Var operator-(const Var& a, double b) { return elementwise(BinaryOp::sub, a, b); }
Var operator*(const Var& a, double b) { return elementwise(BinaryOp::mul, a, b); }
Var operator/(const Var& a, double b) { return elementwise(BinaryOp::div, a, b); }
Var operator*(double a, const Var& b) { return elementwise(BinaryOp::mul, b, a); }
Var operator-(const Var& a) { return elementwise(UnaryOp::neg, a); }

Var exp(const Var& a) { return elementwise(UnaryOp::exp, a); }
Var log(const Var& a) { return elementwise(UnaryOp::log, a); }
Var tanh(const Var& a) { return elementwise(UnaryOp::tanh, a); }
Var sigmoid(const Var& a) { return elementwise(UnaryOp::sigmoid, a); }

Var matmul(const Var& a, const Var& b) {
  return Var::make(matmul(a.value(), b.value()), {a, b}, [](const Tensor& g, std::span<const Var> p) {
    if (p[0].requires_grad()) Var::accumulate_grad(p[0], matmul_nt(g, p[1].value()));
    if (p[1].requires_grad()) Var::accumulate_grad(p[1], matmul_tn(p[0].value(), g));
  });
}

Var transpose(const Var& a) {
  return Var::make(transpose(a.value()), {a}, [](const Tensor& g, std::span<const Var> p) {
    Var::accumulate_grad(p[0], transpose(g));
  });
}

Var reduce_sum(const Var& a, std::span<const std::size_t> axes) {
  Tensor out = reduce_sum(a.value(), axes);
  std::vector<bool> reduced(a.value().rank(), false);
  for (auto ax : axes) reduced[ax] = true;
  return Var::make(std::move(out), {a}, [reduced](const Tensor& g, std::span<const Var> p) {
    Var::accumulate_grad(p[0], expand_reduced(g, p[0].value().shape(), reduced));
  });
}

Var reduce_sum_all(const Var& a) {
  return Var::make(reduce_sum_all(a.value()), {a}, [](const Tensor& g, std::span<const Var> p) {
    Var::accumulate_grad(p[0], Tensor(p[0].value().shape(), g.item()));
  });
}

Var reshape(const Var& a, Shape shape) {
  return Var::make(a.value().reshaped(std::move(shape)), {a}, [](const Tensor& g, std::span<const Var> p) {
    Var::accumulate_grad(p[0], g.reshaped(p[0].value().shape()));
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  std::vector<Tensor> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(p.value());
  Tensor out = concat(values, axis);
  return Var::make(std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                   [axis](const Tensor& g, std::span<const Var> p) {
                     std::size_t offset = 0;
                     for (const auto& part : p) {
                       const std::size_t len = part.value().shape()[axis];
                       if (part.requires_grad()) {
                         Var::accumulate_grad(part, slice(g, axis, offset, offset + len));
                       }
                       offset += len;
                     }
                   });
}

Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  Tensor out = slice(a.value(), axis, begin, end);
  return Var::make(std::move(out), {a}, [axis, begin, end](const Tensor& g, std::span<const Var> p) {
    std::vector<std::size_t> index(end - begin);
    for (std::size_t i = 0; i < index.size(); ++i) index[i] = begin + i;
    Var::accumulate_grad(p[0], scatter_add(g, axis, index, p[0].value().shape()));
  });
}

Var gather(const Var& a, std::size_t axis, std::span<const std::size_t> index) {
  Tensor out = gather(a.value(), axis, index);
  std::vector<std::size_t> idx(index.begin(), index.end());
  return Var::make(std::move(out), {a}, [axis, idx = std::move(idx)](const Tensor& g, std::span<const Var> p) {
    Var::accumulate_grad(p[0], scatter_add(g, axis, idx, p[0].value().shape()));
  });
}

// ---------------------------------------------------------------------------

double grad_check(const std::function<Var()>& f, std::span<Parameter* const> params, double eps) {
  // Parameters the graph does not reach keep a zero gradient.
  for (auto* p : params) p->grad = Tensor(p->value.shape(), 0.0);
  Var root = f();
  backward(root);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad);

  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + eps;
      const double up = f().value().item();
      p.value[i] = saved - eps;
      const double down = f().value().item();
      p.value[i] = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double an = analytic[k][i];
      const double denom = std::max({std::abs(an), std::abs(fd), 1e-8});
      worst = std::max(worst, std::abs(an - fd) / denom);
    }
  }
  return worst;
}

}  // namespace lcflow
