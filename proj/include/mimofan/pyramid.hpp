#pragma once

#include <cstddef>
#include <vector>

#include "mimofan/tensor.hpp"

namespace mimofan {

enum class PyramidKind { image, label, probability };

/// S tensors at dyadically decreasing spatial size; level s is (h / 2^s, w / 2^s).
template <typename Scalar>
struct ScalePyramid {
  PyramidKind kind = PyramidKind::image;
  std::vector<Tensor<Scalar>> levels;

  std::size_t size() const { return levels.size(); }
  const Tensor<Scalar>& operator[](std::size_t s) const { return levels[s]; }
  Tensor<Scalar>& operator[](std::size_t s) { return levels[s]; }
};

inline constexpr int kDefaultScales = 5;

/// Throws DimensionError unless h and w are divisible by 2^(scales-1).
void require_pyramid_divisible(const char* op, const Shape& shape, int scales);

/// Throws ValidationError if any value is not exactly 0 or 1.
template <typename Scalar>
void require_binary(const char* op, const Tensor<Scalar>& mask);

/// Level 0 is the image itself; every further level is the 2x2 average of the previous one.
template <typename Scalar>
ScalePyramid<Scalar> image_pyramid(const Tensor<Scalar>& image, int scales = kDefaultScales);

/// Binary label pyramid. Each level is the 2x2 block mean of the previous
/// level, thresholded at 0.5; an exact 0.5 tie becomes foreground.
template <typename Scalar>
ScalePyramid<Scalar> label_pyramid(const Tensor<Scalar>& mask, int scales = kDefaultScales);

}  // namespace mimofan
