#include "mimofan/tensor.hpp"

#include <algorithm>
#include <vector>

namespace mimofan {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

namespace {

void check_extents(const Shape& shape) {
  if (shape.n == 0) throw DimensionError("tensor: batch axis must be >= 1");
  if (shape.c == 0) throw DimensionError("tensor: channel axis must be >= 1");
  if (shape.h == 0) throw DimensionError("tensor: height axis must be >= 1");
  if (shape.w == 0) throw DimensionError("tensor: width axis must be >= 1");
}

}  // namespace

template <typename Scalar>
Tensor<Scalar>::Tensor(const Shape& shape, Scalar fill) : shape_(shape) {
  check_extents(shape);
  data_ = Array::Constant(static_cast<Eigen::Index>(shape.size()), fill);
}

template <typename Scalar>
Tensor<Scalar>::Tensor(const Shape& shape, Array data) : shape_(shape), data_(std::move(data)) {
  check_extents(shape);
  if (static_cast<std::size_t>(data_.size()) != shape.size()) {
    throw DimensionError("tensor: data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape.str());
  }
}

template <typename Scalar>
Tensor<Scalar>::Tensor(const Shape& shape, std::initializer_list<Scalar> values) : shape_(shape) {
  check_extents(shape);
  if (values.size() != shape.size()) {
    throw DimensionError("tensor: " + std::to_string(values.size()) +
                         " values given for shape " + shape.str());
  }
  data_.resize(static_cast<Eigen::Index>(values.size()));
  std::copy(values.begin(), values.end(), data_.data());
}

template <typename Scalar>
typename Tensor<Scalar>::Array& Tensor<Scalar>::grad() {
  if (!grad_) grad_ = Array::Zero(data_.size());
  return *grad_;
}

template <typename Scalar>
const typename Tensor<Scalar>::Array& Tensor<Scalar>::grad() const {
  if (!grad_) throw ContractError("tensor: gradient requested but never populated");
  return *grad_;
}

template <typename Scalar>
void Tensor<Scalar>::zero_grad() {
  if (grad_) {
    grad_->setZero();
  } else {
    grad_ = Array::Zero(data_.size());
  }
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::reshaped(const Shape& shape) const {
  return Tensor(shape, data_);
}

void require_dim(const char* op, const char* axis, std::size_t got, std::size_t expected) {
  if (got != expected) {
    throw DimensionError(std::string(op) + ": " + axis + " axis mismatch (got " +
                         std::to_string(got) + ", expected " + std::to_string(expected) + ")");
  }
}

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  require_dim(op, "batch", b.n, a.n);
  require_dim(op, "channel", b.c, a.c);
  require_dim(op, "height", b.h, a.h);
  require_dim(op, "width", b.w, a.w);
}

template <typename Scalar>
Tensor<Scalar> batch_item(const Tensor<Scalar>& t, std::size_t index) {
  if (index >= t.shape().n) throw DimensionError("batch_item: batch index out of range");
  Shape s = t.shape();
  const std::size_t stride = s.c * s.h * s.w;
  s.n = 1;
  Tensor<Scalar> out(s);
  std::copy_n(t.ptr() + index * stride, stride, out.ptr());
  return out;
}

template <typename Scalar>
Tensor<Scalar> stack_batch(const std::vector<Tensor<Scalar>>& items) {
  if (items.empty()) throw ContractError("stack_batch: empty list");
  Shape s = items.front().shape();
  std::size_t total = 0;
  for (const auto& item : items) {
    Shape a = item.shape();
    Shape b = s;
    a.n = b.n = 1;
    require_same_shape("stack_batch", b, a);
    total += item.shape().n;
  }
  s.n = total;
  Tensor<Scalar> out(s);
  Scalar* dst = out.ptr();
  for (const auto& item : items) dst = std::copy_n(item.ptr(), item.size(), dst);
  return out;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> batch_item(const Tensor<float>&, std::size_t);
template Tensor<double> batch_item(const Tensor<double>&, std::size_t);
template Tensor<float> stack_batch(const std::vector<Tensor<float>>&);
template Tensor<double> stack_batch(const std::vector<Tensor<double>>&);

}  // namespace mimofan
