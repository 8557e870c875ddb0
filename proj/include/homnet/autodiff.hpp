// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "homnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace homnet {

template <typename Scalar>
class Graph;

// Handle to a value recorded on a Graph.
template <typename Scalar>
struct Var {
  Graph<Scalar>* graph = nullptr;
  Index id = -1;

  const Tensor<Scalar>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape(); }
  Index size() const { return value().size(); }
  bool requires_grad() const { return graph->requires_grad(id); }
};

// Tape of operations recorded during one forward pass. Backward visits the
// tape in exact reverse recording order, so inputs always precede outputs.
// A Graph is single-threaded; build a new one per forward pass.
template <typename Scalar>
class Graph {
 public:
  using T = Tensor<Scalar>;
  using Vector = typename T::Vector;
  using BackwardFn = std::function<void(Graph&, const Vector& dout, Index self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> constant(T value)
  {
    nodes_.push_back(Node{std::move(value), nullptr, false, {}, {}});
    return handle();
  }

  // The tensor must outlive the graph. If it requires grad, backward()
  // accumulates dL/dtensor into tensor.grad().
  Var<Scalar> leaf(T& tensor)
  {
    nodes_.push_back(Node{T{}, &tensor, grad_enabled_ && tensor.requires_grad(), {}, {}});
    return handle();
  }

  // With gradients disabled no leaf requires grad, so ops keep no backward
  // state. Used for inference passes.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  Var<Scalar> record(T value, std::vector<Index> inputs, BackwardFn fn)
  {
#ifndef NDEBUG
    if (!value.data().allFinite()) throw std::runtime_error("graph: non-finite value produced by forward op");
#endif
    bool needs = std::any_of(inputs.begin(), inputs.end(), [&](Index i) { return nodes_[i].requires_grad; });
    Node node{std::move(value), nullptr, needs, {}, {}};
    if (needs) {
      node.inputs = std::move(inputs);
      node.backward = std::move(fn);
    }
    nodes_.push_back(std::move(node));
    return handle();
  }

  const T& value(Index id) const
  {
    const Node& n = nodes_.at(static_cast<std::size_t>(id));
    return n.external ? *n.external : n.owned;
  }
  bool requires_grad(Index id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }
  Index size() const { return static_cast<Index>(nodes_.size()); }

  // Gradient accumulator for node `id`; only valid during backward().
  Vector& grad(Index id)
  {
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.size() == 0) g = Vector::Zero(value(id).size());
    return g;
  }

  void backward(Var<Scalar> loss)
  {
    if (loss.graph != this) throw std::invalid_argument("backward: loss belongs to another graph");
    if (loss.size() != 1)
      throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_to_string(loss.shape()));

    grads_.assign(nodes_.size(), Vector{});
    grad(loss.id).setConstant(Scalar{1});
    for (Index i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad) continue;
      const Vector& g = grads_[static_cast<std::size_t>(i)];
      if (n.backward) {
        if (g.size() != 0) n.backward(*this, g, i);
      } else if (n.external) {
        Vector& target = n.external->grad();
        if (g.size() != 0) target += g;
      }
    }
    // Leaves recorded after the loss still get a (zero) gradient slot.
    for (std::size_t i = static_cast<std::size_t>(loss.id) + 1; i < nodes_.size(); ++i)
      if (nodes_[i].external && nodes_[i].requires_grad) nodes_[i].external->grad();
    grads_.clear();
  }

 private:
  struct Node {
    T owned;
    T* external;
    bool requires_grad;
    std::vector<Index> inputs;
    BackwardFn backward;
  };

  Var<Scalar> handle() { return Var<Scalar>{this, static_cast<Index>(nodes_.size()) - 1}; }

  std::vector<Node> nodes_;
  std::vector<Vector> grads_;
  bool grad_enabled_ = true;
};

namespace detail {

template <typename Scalar>
void require_same_shape(const char* op, const Var<Scalar>& a, const Var<Scalar>& b)
{
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

template <typename Scalar>
void require_same_graph(const Var<Scalar>& a, const Var<Scalar>& b)
{
  if (a.graph != b.graph) throw std::invalid_argument("ops: inputs recorded on different graphs");
}

// Elementwise unary op; `deriv(x, y)` gives dy/dx from input and output.
template <typename Scalar, typename Fwd, typename Deriv>
Var<Scalar> unary(Var<Scalar> x, Fwd fwd, Deriv deriv)
{
  Graph<Scalar>& g = *x.graph;
  Tensor<Scalar> out(x.shape(), x.value().data().unaryExpr(fwd));
  return g.record(std::move(out), {x.id}, [xi = x.id, deriv](Graph<Scalar>& g, const auto& dout, Index self) {
    if (!g.requires_grad(xi)) return;
    const auto& xv = g.value(xi).data();
    const auto& yv = g.value(self).data();
    auto& dx = g.grad(xi);
    for (Index k = 0; k < dout.size(); ++k) dx[k] += dout[k] * deriv(xv[k], yv[k]);
  });
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b)
{
  detail::require_same_graph(a, b);
  detail::require_same_shape("add", a, b);
  Tensor<Scalar> out(a.shape(), a.value().data() + b.value().data());
  return a.graph->record(std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id](auto& g, const auto& dout, Index) {
    if (g.requires_grad(ai)) g.grad(ai) += dout;
    if (g.requires_grad(bi)) g.grad(bi) += dout;
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b)
{
  detail::require_same_graph(a, b);
  detail::require_same_shape("sub", a, b);
  Tensor<Scalar> out(a.shape(), a.value().data() - b.value().data());
  return a.graph->record(std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id](auto& g, const auto& dout, Index) {
    if (g.requires_grad(ai)) g.grad(ai) += dout;
    if (g.requires_grad(bi)) g.grad(bi) -= dout;
  });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b)
{
  detail::require_same_graph(a, b);
  detail::require_same_shape("mul", a, b);
  Tensor<Scalar> out(a.shape(), a.value().data().cwiseProduct(b.value().data()));
  return a.graph->record(std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id](auto& g, const auto& dout, Index) {
    if (g.requires_grad(ai)) g.grad(ai) += dout.cwiseProduct(g.value(bi).data());
    if (g.requires_grad(bi)) g.grad(bi) += dout.cwiseProduct(g.value(ai).data());
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> x, Scalar factor)
{
  Tensor<Scalar> out(x.shape(), x.value().data() * factor);
  return x.graph->record(std::move(out), {x.id}, [xi = x.id, factor](auto& g, const auto& dout, Index) {
    g.grad(xi) += dout * factor;
  });
}

template <typename Scalar>
Var<Scalar> add_scalar(Var<Scalar> x, Scalar offset)
{
  Tensor<Scalar> out(x.shape(), (x.value().data().array() + offset).matrix());
  return x.graph->record(std::move(out), {x.id}, [xi = x.id](auto& g, const auto& dout, Index) { g.grad(xi) += dout; });
}

// x: [..., F] plus b: [F] broadcast over the leading axes.
template <typename Scalar>
Var<Scalar> add_rowwise(Var<Scalar> x, Var<Scalar> b)
{
  detail::require_same_graph(x, b);
  const Index features = b.size();
  if (x.shape().empty() || x.shape().back() != features) throw ShapeError("add_rowwise", x.shape(), b.shape());
  Tensor<Scalar> out = x.value();
  Eigen::Map<typename Tensor<Scalar>::RowMatrix> m(out.data().data(), out.size() / features, features);
  m.rowwise() += b.value().data().transpose();
  return x.graph->record(std::move(out), {x.id, b.id}, [xi = x.id, bi = b.id, features](auto& g, const auto& dout, Index) {
    if (g.requires_grad(xi)) g.grad(xi) += dout;
    if (g.requires_grad(bi)) {
      Eigen::Map<const typename Tensor<Scalar>::RowMatrix> d(dout.data(), dout.size() / features, features);
      g.grad(bi) += d.colwise().sum().transpose();
    }
  });
}

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b)
{
  detail::require_same_graph(a, b);
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul", a.shape(), b.shape());
  const Index m = a.shape()[0], n = b.shape()[1];
  Tensor<Scalar> out({m, n});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return a.graph->record(std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id, m, n](auto& g, const auto& dout, Index) {
    Eigen::Map<const typename Tensor<Scalar>::RowMatrix> d(dout.data(), m, n);
    if (g.requires_grad(ai)) {
      const auto& bv = g.value(bi);
      Eigen::Map<typename Tensor<Scalar>::RowMatrix> da(g.grad(ai).data(), m, bv.shape()[0]);
      da.noalias() += d * bv.matrix().transpose();
    }
    if (g.requires_grad(bi)) {
      const auto& av = g.value(ai);
      Eigen::Map<typename Tensor<Scalar>::RowMatrix> db(g.grad(bi).data(), av.shape()[1], n);
      db.noalias() += av.matrix().transpose() * d;
    }
  });
}

// Affine map y = x W^T + b with x: [B, in], W: [out, in], b: [out].
template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias)
{
  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  detail::require_same_graph(x, weight);
  detail::require_same_graph(x, bias);
  const auto& w = weight.value();
  if (x.value().rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1]) throw ShapeError("linear", x.shape(), w.shape());
  if (bias.size() != w.shape()[0]) throw ShapeError("linear bias", w.shape(), bias.shape());
  const Index batch = x.shape()[0], in = w.shape()[1], outs = w.shape()[0];
  Tensor<Scalar> out({batch, outs});
  out.matrix().noalias() = x.value().matrix() * w.matrix().transpose();
  out.matrix().rowwise() += bias.value().data().transpose();
  return x.graph->record(std::move(out), {x.id, weight.id, bias.id},
                         [xi = x.id, wi = weight.id, bi = bias.id, batch, in, outs](auto& g, const auto& dout, Index) {
                           Eigen::Map<const RowMatrix> d(dout.data(), batch, outs);
                           if (g.requires_grad(xi)) {
                             Eigen::Map<RowMatrix> dx(g.grad(xi).data(), batch, in);
                             dx.noalias() += d * g.value(wi).matrix();
                           }
                           if (g.requires_grad(wi)) {
                             Eigen::Map<RowMatrix> dw(g.grad(wi).data(), outs, in);
                             dw.noalias() += d.transpose() * g.value(xi).matrix();
                           }
                           if (g.requires_grad(bi)) g.grad(bi) += d.colwise().sum().transpose();
                         });
}

// Subgradient at exactly 0 is 0.
template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x)
{
  return detail::unary(
      x, [](Scalar v) { return v > Scalar{0} ? v : Scalar{0}; },
      [](Scalar v, Scalar) { return v > Scalar{0} ? Scalar{1} : Scalar{0}; });
}

template <typename Scalar>
Scalar sigmoid_value(Scalar v)
{
  // Split on sign so exp never overflows.
  if (v >= Scalar{0}) return Scalar{1} / (Scalar{1} + std::exp(-v));
  const Scalar e = std::exp(v);
  return e / (Scalar{1} + e);
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> x)
{
  return detail::unary(
      x, [](Scalar v) { return sigmoid_value(v); }, [](Scalar, Scalar y) { return y * (Scalar{1} - y); });
}

template <typename Scalar>
Var<Scalar> square(Var<Scalar> x)
{
  return detail::unary(
      x, [](Scalar v) { return v * v; }, [](Scalar v, Scalar) { return Scalar{2} * v; });
}

// Derivative at 0 is taken as 0 (used for distances of capsules sitting on
// the center, where the loss is flat anyway).
template <typename Scalar>
Var<Scalar> sqrt(Var<Scalar> x)
{
  return detail::unary(
      x,
      [](Scalar v) {
        if (v < Scalar{0}) throw std::domain_error("sqrt: negative input");
        return std::sqrt(v);
      },
      [](Scalar, Scalar y) { return y > Scalar{0} ? Scalar{0.5} / y : Scalar{0}; });
}

template <typename Scalar>
Var<Scalar> clip(Var<Scalar> x, Scalar lo, Scalar hi)
{
  if (!(lo <= hi)) throw std::invalid_argument("clip: lo > hi");
  return detail::unary(
      x, [lo, hi](Scalar v) { return std::clamp(v, lo, hi); },
      [lo, hi](Scalar v, Scalar) { return (v >= lo && v <= hi) ? Scalar{1} : Scalar{0}; });
}

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> x, Shape shape)
{
  if (shape_size(shape) != x.size()) throw ShapeError("reshape", x.shape(), shape);
  Tensor<Scalar> out = x.value();
  out.clear_grad();
  out.set_requires_grad(false);
  out.reshape(std::move(shape));
  return x.graph->record(std::move(out), {x.id}, [xi = x.id](auto& g, const auto& dout, Index) { g.grad(xi) += dout; });
}

// Reductions accumulate in double regardless of Scalar.
template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x)
{
  const double total = x.value().data().template cast<double>().sum();
  Tensor<Scalar> out({}, {static_cast<Scalar>(total)});
  return x.graph->record(std::move(out), {x.id}, [xi = x.id](auto& g, const auto& dout, Index) {
    g.grad(xi).array() += dout[0];
  });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> x)
{
  const Index count = x.size();
  const double total = x.value().data().template cast<double>().sum();
  Tensor<Scalar> out({}, {static_cast<Scalar>(total / static_cast<double>(count))});
  return x.graph->record(std::move(out), {x.id}, [xi = x.id, count](auto& g, const auto& dout, Index) {
    g.grad(xi).array() += dout[0] / static_cast<Scalar>(count);
  });
}

// Sum over the last axis: [..., N] -> [...].
template <typename Scalar>
Var<Scalar> sum_last(Var<Scalar> x)
{
  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  if (x.value().rank() < 2) throw ShapeError("sum_last: need rank >= 2, got " + shape_to_string(x.shape()));
  const Index inner = x.shape().back();
  const Index outer = x.size() / inner;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  Eigen::Map<const RowMatrix> m(x.value().data().data(), outer, inner);
  Tensor<Scalar> out(shape, m.rowwise().sum());
  return x.graph->record(std::move(out), {x.id}, [xi = x.id, outer, inner](auto& g, const auto& dout, Index) {
    Eigen::Map<RowMatrix> dx(g.grad(xi).data(), outer, inner);
    dx.colwise() += dout;
  });
}

namespace detail {

// Row-major view of a tensor around `axis`: outer x axis x inner.
inline void split_axis(const Shape& shape, Index axis, Index& outer, Index& mid, Index& inner)
{
  if (axis < 0 || axis >= static_cast<Index>(shape.size()))
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape));
  outer = 1;
  inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) inner *= shape[static_cast<std::size_t>(i)];
  mid = shape[static_cast<std::size_t>(axis)];
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> concat(std::span<const Var<Scalar>> parts, Index axis)
{
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape shape = parts.front().shape();
  Index outer = 0, mid = 0, inner = 0;
  detail::split_axis(shape, axis, outer, mid, inner);
  std::vector<Index> ids, widths;
  Index total = 0;
  for (const auto& p : parts) {
    detail::require_same_graph(parts.front(), p);
    Shape s = p.shape();
    Shape a = s, b = shape;
    if (a.size() != b.size()) throw ShapeError("concat", shape, s);
    a[static_cast<std::size_t>(axis)] = b[static_cast<std::size_t>(axis)] = 0;
    if (a != b) throw ShapeError("concat", shape, s);
    ids.push_back(p.id);
    widths.push_back(s[static_cast<std::size_t>(axis)]);
    total += widths.back();
  }
  shape[static_cast<std::size_t>(axis)] = total;
  Tensor<Scalar> out(shape);
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& src = parts[k].value().data();
    const Index w = widths[k] * inner;
    for (Index o = 0; o < outer; ++o) out.data().segment(o * total * inner + offset, w) = src.segment(o * w, w);
    offset += w;
  }
  return parts.front().graph->record(std::move(out), ids, [ids, widths, outer, inner, total](auto& g, const auto& dout, Index) {
    Index off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const Index w = widths[k] * inner;
      if (g.requires_grad(ids[k])) {
        auto& dx = g.grad(ids[k]);
        for (Index o = 0; o < outer; ++o) dx.segment(o * w, w) += dout.segment(o * total * inner + off, w);
      }
      off += w;
    }
  });
}

template <typename Scalar>
Var<Scalar> concat(std::initializer_list<Var<Scalar>> parts, Index axis)
{
  std::vector<Var<Scalar>> v(parts);
  return concat(std::span<const Var<Scalar>>(v), axis);
}

// Half-open range [begin, end) along `axis`.
template <typename Scalar>
Var<Scalar> slice(Var<Scalar> x, Index axis, Index begin, Index end)
{
  Index outer = 0, mid = 0, inner = 0;
  detail::split_axis(x.shape(), axis, outer, mid, inner);
  if (begin < 0 || end > mid || begin >= end)
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     shape_to_string(x.shape()));
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(axis)] = end - begin;
  Tensor<Scalar> out(shape);
  const Index w = (end - begin) * inner;
  for (Index o = 0; o < outer; ++o) out.data().segment(o * w, w) = x.value().data().segment((o * mid + begin) * inner, w);
  return x.graph->record(std::move(out), {x.id}, [xi = x.id, outer, mid, inner, begin, w](auto& g, const auto& dout, Index) {
    auto& dx = g.grad(xi);
    for (Index o = 0; o < outer; ++o) dx.segment((o * mid + begin) * inner, w) += dout.segment(o * w, w);
  });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b)
{
  return add(a, b);
}
template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b)
{
  return sub(a, b);
}
template <typename Scalar>
Var<Scalar> operator*(Var<Scalar> a, Var<Scalar> b)
{
  return mul(a, b);
}

}  // namespace homnet
