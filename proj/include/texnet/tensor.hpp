#pragma once

#include <Eigen/Core>

#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace texnet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_count(const Shape& shape) {
  Index n = 1;
  for (const Index d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense n-dimensional array, contiguous row-major. Feature maps use the
// [batch, height, width, channels] layout, so channels vary fastest.
template <typename Scalar>
class Tensor {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), values_(Storage::Zero(checked_count(shape_))) {}

  Tensor(Shape shape, std::initializer_list<Scalar> init) : shape_(std::move(shape)) {
    if (static_cast<Index>(init.size()) != checked_count(shape_))
      throw std::invalid_argument("tensor init list does not match shape " + shape_str(shape_));
    values_.resize(static_cast<Index>(init.size()));
    Index i = 0;
    for (const Scalar v : init) values_[i++] = v;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.values_.setConstant(value);
    return t;
  }

  static Tensor ones(Shape shape) { return constant(std::move(shape), Scalar(1)); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index size() const { return values_.size(); }

  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }

  Storage& values() { return values_; }
  const Storage& values() const { return values_; }

  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  // Rank-4 accessor for [N,H,W,C] maps.
  Scalar& operator()(Index n, Index y, Index x, Index c) {
    return values_[((n * shape_[1] + y) * shape_[2] + x) * shape_[3] + c];
  }
  Scalar operator()(Index n, Index y, Index x, Index c) const {
    return values_[((n * shape_[1] + y) * shape_[2] + x) * shape_[3] + c];
  }

  // Rank-3 accessor for [H,W,C] images.
  Scalar& operator()(Index y, Index x, Index c) {
    return values_[(y * shape_[1] + x) * shape_[2] + c];
  }
  Scalar operator()(Index y, Index x, Index c) const {
    return values_[(y * shape_[1] + x) * shape_[2] + c];
  }

  // Rank-2 accessor.
  Scalar& operator()(Index r, Index c) { return values_[r * shape_[1] + c]; }
  Scalar operator()(Index r, Index c) const { return values_[r * shape_[1] + c]; }

  Tensor reshaped(Shape shape) const {
    if (shape_count(shape) != size())
      throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                                  " changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.values_ = values_;
    return t;
  }

  void reshape_in_place(Shape shape) {
    if (shape_count(shape) != size())
      throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                                  " changes element count");
    shape_ = std::move(shape);
  }

  bool all_finite() const { return values_.isFinite().all(); }

  void set_zero() { values_.setZero(); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> t;
    t = Tensor<Other>(shape_);
    t.values() = values_.template cast<Other>();
    return t;
  }

 private:
  static Index checked_count(const Shape& shape) {
    for (const Index d : shape)
      if (d <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
    return shape_count(shape);
  }

  Shape shape_;
  Storage values_;
};

template <typename Scalar>
void require_shape(const Tensor<Scalar>& t, const Shape& expected, const char* what) {
  if (t.shape() != expected)
    throw std::invalid_argument(std::string(what) + ": expected shape " + shape_str(expected) +
                                ", got " + shape_str(t.shape()));
}

template <typename Scalar>
void require_finite(const Tensor<Scalar>& t, const char* what) {
  if (!t.all_finite())
    throw std::invalid_argument(std::string(what) + ": non-finite values");
}

using MatrixMapRow =
    Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Row-major matrix view over contiguous tensor storage.
template <typename Scalar>
Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> as_matrix(
    Tensor<Scalar>& t, Index rows, Index cols) {
  if (rows * cols != t.size()) throw std::invalid_argument("matrix view does not cover tensor");
  return {t.data(), rows, cols};
}

template <typename Scalar>
Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> as_matrix(
    const Tensor<Scalar>& t, Index rows, Index cols) {
  if (rows * cols != t.size()) throw std::invalid_argument("matrix view does not cover tensor");
  return {t.data(), rows, cols};
}

}  // namespace texnet
