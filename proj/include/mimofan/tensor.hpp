#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include "mimofan/errors.hpp"

namespace mimofan {

/// Extents of a rank-4 tensor in (batch, channel, height, width) order.
struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t size() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense row-major rank-4 array with an optional gradient buffer.
///
/// Layout is NCHW: element (n, c, y, x) lives at ((n * C + c) * H + y) * W + x.
/// All extents are at least one. The gradient slot, when allocated, always has
/// the same number of elements as the data.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() : Tensor(Shape{}) {}
  explicit Tensor(const Shape& shape, Scalar fill = Scalar(0));
  Tensor(const Shape& shape, Array data);
  Tensor(const Shape& shape, std::initializer_list<Scalar> values);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return shape_.size(); }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  Scalar& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[static_cast<Eigen::Index>(offset(n, c, y, x))];
  }
  Scalar operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[static_cast<Eigen::Index>(offset(n, c, y, x))];
  }
  Scalar& operator[](std::size_t i) { return data_[static_cast<Eigen::Index>(i)]; }
  Scalar operator[](std::size_t i) const { return data_[static_cast<Eigen::Index>(i)]; }

  Array& data() { return data_; }
  const Array& data() const { return data_; }
  Scalar* ptr() { return data_.data(); }
  const Scalar* ptr() const { return data_.data(); }

  /// Pointer to the start of plane (n, c).
  Scalar* plane(std::size_t n, std::size_t c) { return ptr() + offset(n, c, 0, 0); }
  const Scalar* plane(std::size_t n, std::size_t c) const { return ptr() + offset(n, c, 0, 0); }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool flag) { requires_grad_ = flag; }

  bool has_grad() const { return grad_.has_value(); }
  /// Gradient buffer; allocated (zero-filled) on first access.
  Array& grad();
  const Array& grad() const;
  void zero_grad();
  void clear_grad() { grad_.reset(); }

  bool all_finite() const { return data_.allFinite(); }
  Scalar sum() const { return data_.sum(); }
  Scalar mean() const { return data_.mean(); }

  Tensor reshaped(const Shape& shape) const;

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>().eval());
  }

 private:
  Shape shape_;
  Array data_;
  bool requires_grad_ = false;
  std::optional<Array> grad_;
};

/// Throws DimensionError naming `axis` when `got != expected`.
void require_dim(const char* op, const char* axis, std::size_t got, std::size_t expected);

/// Throws DimensionError unless the two shapes are identical.
void require_same_shape(const char* op, const Shape& a, const Shape& b);

/// Copies one sample out of a batch.
template <typename Scalar>
Tensor<Scalar> batch_item(const Tensor<Scalar>& t, std::size_t index);

/// Stacks same-shaped tensors along the batch axis.
template <typename Scalar>
Tensor<Scalar> stack_batch(const std::vector<Tensor<Scalar>>& items);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace mimofan
