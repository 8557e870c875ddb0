// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace homnet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape)
{
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_to_string(const Shape& shape)
{
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;

  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : std::invalid_argument(op + ": shape mismatch " + shape_to_string(a) + " vs " + shape_to_string(b))
  {
  }
};

// Dense row-major array with a shape tag. Gradients live next to the data so
// a parameter tensor can be handed to a Graph as a leaf and receive dL/dx.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Vector::Zero(checked_size(shape_))) {}

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data))
  {
    if (shape_size(shape_) != data_.size())
      throw ShapeError("tensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_to_string(shape_));
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values) : Tensor(std::move(shape), to_vector(values)) {}

  static Tensor constant(Shape shape, Scalar value)
  {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  // View as rows x cols, where cols is the product of all trailing axes.
  MatrixMap matrix() { return MatrixMap(data_.data(), leading(), trailing()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), leading(), trailing()); }

  void reshape(Shape shape)
  {
    if (shape_size(shape) != size()) throw ShapeError("reshape", shape_, shape);
    shape_ = std::move(shape);
  }

  Tensor reshaped(Shape shape) const
  {
    Tensor out = *this;
    out.reshape(std::move(shape));
    return out;
  }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on = true)
  {
    requires_grad_ = on;
    return *this;
  }

  bool has_grad() const { return grad_.has_value(); }
  Vector& grad()
  {
    if (!grad_) grad_ = Vector::Zero(size());
    return *grad_;
  }
  const std::optional<Vector>& grad_opt() const { return grad_; }
  void zero_grad()
  {
    if (grad_) grad_->setZero();
  }
  void clear_grad() { grad_.reset(); }

 private:
  static Index checked_size(const Shape& shape)
  {
    for (Index d : shape)
      if (d <= 0) throw ShapeError("tensor: non-positive dimension in " + shape_to_string(shape));
    return shape_size(shape);
  }

  static Vector to_vector(std::initializer_list<Scalar> values)
  {
    Vector v(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar x : values) v[i++] = x;
    return v;
  }

  Index leading() const { return shape_.empty() ? 1 : shape_.front(); }
  Index trailing() const { return shape_.empty() ? 1 : size() / shape_.front(); }

  Shape shape_;
  Vector data_;
  bool requires_grad_ = false;
  std::optional<Vector> grad_;
};

}  // namespace homnet
