// SPDX-License-Identifier: Apache-2.0
#pragma once

// Hit-or-Miss layer maths: capsule distances to the central capsule, the
// staircase loss and its gradient, the centripetal loss, masking and argmin
// classification. Plain Eigen overloads work on a single K x n capsule
// matrix; the Var overloads record on a Graph for training.

#include "homnet/autodiff.hpp"

#include <Eigen/Core>

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace homnet {

// Geometry of the centripetal loss. The hit branch (l, h, m) penalises the
// true-class capsule beyond distance m from the center; the miss branch
// (l_miss, h_miss, m_miss) penalises other capsules closer than m_miss.
struct CentripetalParams {
  double l = 0.1;
  double h = 0.2;
  double m = 0.1;
  double l_miss = 0.1;
  double h_miss = 0.2;
  double m_miss = 0.9;
  double lambda = 0.5;
  int capsule_size = 16;

  double half_diagonal() const { return std::sqrt(static_cast<double>(capsule_size)) / 2.0; }

  // Throws std::invalid_argument when the invariants do not hold.
  void validate() const
  {
    const double r = half_diagonal();
    if (capsule_size <= 0) throw std::invalid_argument("centripetal: capsule size must be positive");
    if (!(l > 0 && h > 0 && l_miss > 0 && h_miss > 0)) throw std::invalid_argument("centripetal: l, h, l', h' must be > 0");
    if (!(m > 0 && m < m_miss && m_miss < r))
      throw std::invalid_argument("centripetal: need 0 < m < m' < sqrt(n)/2 (sqrt(n)/2 = " + std::to_string(r) + ")");
    if (!(lambda > 0 && lambda <= 1)) throw std::invalid_argument("centripetal: lambda must be in (0, 1]");
  }
};

// Piecewise linear loss that is zero on [0, m] and whose slope grows by h
// every l units after m. H{0} = 0, so the value at x = m is 0.
template <typename Scalar>
Scalar staircase_loss(Scalar x, Scalar l, Scalar h, Scalar m)
{
  const Scalar t = x - m;
  if (!(t > Scalar{0})) return Scalar{0};
  const Scalar f = std::floor(t / l);
  return (f + Scalar{1}) * h * (t - Scalar{0.5} * f * l);
}

// Slope of staircase_loss. On a breakpoint m + j*l the left step (j*h) is
// returned; at and below m the slope is 0.
template <typename Scalar>
Scalar staircase_grad(Scalar x, Scalar l, Scalar h, Scalar m)
{
  const Scalar t = x - m;
  if (!(t > Scalar{0})) return Scalar{0};
  return std::ceil(t / l) * h;
}

template <typename Scalar>
Scalar hit_loss(Scalar distance, const CentripetalParams& p)
{
  return staircase_loss(distance, Scalar(p.l), Scalar(p.h), Scalar(p.m));
}

// d/d(distance) of the hit term.
template <typename Scalar>
Scalar hit_grad(Scalar distance, const CentripetalParams& p)
{
  return staircase_grad(distance, Scalar(p.l), Scalar(p.h), Scalar(p.m));
}

// The miss term is the staircase mirrored about the maximal distance
// sqrt(n)/2, unweighted (lambda is applied by the caller).
template <typename Scalar>
Scalar miss_loss(Scalar distance, const CentripetalParams& p)
{
  const Scalar r = Scalar(p.half_diagonal());
  return staircase_loss(r - distance, Scalar(p.l_miss), Scalar(p.h_miss), r - Scalar(p.m_miss));
}

// d/d(distance) of the miss term; non-positive because of the reflection.
template <typename Scalar>
Scalar miss_grad(Scalar distance, const CentripetalParams& p)
{
  const Scalar r = Scalar(p.half_diagonal());
  return -staircase_grad(r - distance, Scalar(p.l_miss), Scalar(p.h_miss), r - Scalar(p.m_miss));
}

inline void require_one_hot(std::span<const double> y_true)
{
  int ones = 0;
  for (double v : y_true) {
    if (v == 1.0)
      ++ones;
    else if (v != 0.0)
      throw std::invalid_argument("centripetal_loss: y_true is not one-hot");
  }
  if (ones != 1) throw std::invalid_argument("centripetal_loss: y_true is not one-hot");
}

// Loss of one image from its one-hot label and its K distances.
template <typename Derived>
double centripetal_loss(std::span<const double> y_true, const Eigen::MatrixBase<Derived>& y_pred, const CentripetalParams& p)
{
  require_one_hot(y_true);
  if (static_cast<Index>(y_true.size()) != y_pred.size())
    throw ShapeError("centripetal_loss", Shape{static_cast<Index>(y_true.size())}, Shape{y_pred.size()});
  double total = 0;
  for (Index k = 0; k < y_pred.size(); ++k) {
    const double d = static_cast<double>(y_pred(k));
    const double t = y_true[static_cast<std::size_t>(k)];
    total += t * hit_loss(d, p) + p.lambda * (1.0 - t) * miss_loss(d, p);
  }
  return total;
}

template <typename Derived>
Eigen::VectorXd centripetal_grad(std::span<const double> y_true, const Eigen::MatrixBase<Derived>& y_pred,
                                 const CentripetalParams& p)
{
  require_one_hot(y_true);
  Eigen::VectorXd g(y_pred.size());
  for (Index k = 0; k < y_pred.size(); ++k) {
    const double d = static_cast<double>(y_pred(k));
    const double t = y_true[static_cast<std::size_t>(k)];
    g[k] = t * hit_grad(d, p) + p.lambda * (1.0 - t) * miss_grad(d, p);
  }
  return g;
}

// Euclidean distance of every capsule (row) to the central capsule.
template <typename Derived>
auto predict_distances(const Eigen::MatrixBase<Derived>& hom)
{
  using Scalar = typename Derived::Scalar;
  return (hom.array() - Scalar(0.5)).matrix().rowwise().norm();
}

// Index of the smallest distance, lowest index on ties.
template <typename Derived>
int classify(const Eigen::MatrixBase<Derived>& distances)
{
  if (distances.size() == 0) throw std::invalid_argument("classify: empty prediction");
  Index best = 0;
  for (Index k = 1; k < distances.size(); ++k)
    if (distances(k) < distances(best)) best = k;
  return static_cast<int>(best);
}

// Rows other than `keep` are zeroed, rows concatenated in class order.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> mask_capsules(const Eigen::MatrixBase<Derived>& hom, int keep)
{
  if (keep < 0 || keep >= hom.rows())
    throw std::out_of_range("mask_capsules: class " + std::to_string(keep) + " out of range [0," + std::to_string(hom.rows()) + ")");
  const Index n = hom.cols();
  Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> out = Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1>::Zero(hom.size());
  out.segment(keep * n, n) = hom.row(keep).transpose();
  return out;
}

// ---- graph ops ------------------------------------------------------------

// capsules: [B, K, n] -> distances [B, K].
template <typename Scalar>
Var<Scalar> predict_distances(Var<Scalar> capsules)
{
  if (capsules.value().rank() != 3) throw ShapeError("predict_distances: expected [B,K,n], got " + shape_to_string(capsules.shape()));
  return sqrt(sum_last(square(add_scalar(capsules, Scalar(-0.5)))));
}

// Batch mean of the per-image centripetal loss. distances: [B, K].
template <typename Scalar>
Var<Scalar> centripetal_loss(Var<Scalar> distances, std::span<const int> labels, const CentripetalParams& p)
{
  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  if (distances.value().rank() != 2 || distances.shape()[0] != static_cast<Index>(labels.size()))
    throw ShapeError("centripetal_loss", distances.shape(), Shape{static_cast<Index>(labels.size())});
  const Index batch = distances.shape()[0], classes = distances.shape()[1];
  Eigen::Map<const RowMatrix> d(distances.value().data().data(), batch, classes);
  RowMatrix slope(batch, classes);
  double total = 0;
  for (Index b = 0; b < batch; ++b) {
    const int label = labels[static_cast<std::size_t>(b)];
    if (label < 0 || label >= classes) throw std::out_of_range("centripetal_loss: label " + std::to_string(label) + " out of range");
    for (Index k = 0; k < classes; ++k) {
      const Scalar x = d(b, k);
      if (k == label) {
        total += static_cast<double>(hit_loss(x, p));
        slope(b, k) = hit_grad(x, p);
      } else {
        total += p.lambda * static_cast<double>(miss_loss(x, p));
        slope(b, k) = Scalar(p.lambda) * miss_grad(x, p);
      }
    }
  }
  Tensor<Scalar> out({}, {static_cast<Scalar>(total / static_cast<double>(batch))});
  return distances.graph->record(std::move(out), {distances.id},
                                 [di = distances.id, slope = std::move(slope), batch](auto& g, const auto& dout, Index) {
                                   Eigen::Map<const typename Tensor<Scalar>::Vector> s(slope.data(), slope.size());
                                   g.grad(di) += s * (dout[0] / static_cast<Scalar>(batch));
                                 });
}

// 0/1 mask of shape [B, K*n] keeping row labels[b] of each capsule matrix.
template <typename Scalar>
Tensor<Scalar> capsule_mask(std::span<const int> keep, Index classes, Index capsule_size)
{
  const Index batch = static_cast<Index>(keep.size());
  Tensor<Scalar> mask({batch, classes * capsule_size});
  for (Index b = 0; b < batch; ++b) {
    const int k = keep[static_cast<std::size_t>(b)];
    if (k < 0 || k >= classes)
      throw std::out_of_range("mask_capsules: class " + std::to_string(k) + " out of range [0," + std::to_string(classes) + ")");
    mask.data().segment(b * classes * capsule_size + k * capsule_size, capsule_size).setOnes();
  }
  return mask;
}

// capsules: [B, K, n] -> [B, K*n] with everything but row keep[b] zeroed.
template <typename Scalar>
Var<Scalar> mask_capsules(Var<Scalar> capsules, std::span<const int> keep)
{
  if (capsules.value().rank() != 3) throw ShapeError("mask_capsules: expected [B,K,n], got " + shape_to_string(capsules.shape()));
  const Index batch = capsules.shape()[0], classes = capsules.shape()[1], n = capsules.shape()[2];
  if (static_cast<Index>(keep.size()) != batch) throw ShapeError("mask_capsules", capsules.shape(), Shape{static_cast<Index>(keep.size())});
  Var<Scalar> flat = reshape(capsules, {batch, classes * n});
  return mul(flat, capsules.graph->constant(capsule_mask<Scalar>(keep, classes, n)));
}

// Per-row argmin of a [B, K] distance tensor.
template <typename Scalar>
std::vector<int> classify(const Tensor<Scalar>& distances)
{
  const Index batch = distances.dim(0);
  std::vector<int> out(static_cast<std::size_t>(batch));
  const auto m = distances.matrix();
  for (Index b = 0; b < batch; ++b) out[static_cast<std::size_t>(b)] = classify(m.row(b));
  return out;
}

}  // namespace homnet
