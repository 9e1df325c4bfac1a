#include "mimofan/pyramid.hpp"

#include <string>

#include "mimofan/kernels.hpp"

namespace mimofan {

void require_pyramid_divisible(const char* op, const Shape& shape, int scales) {
  if (scales < 1) throw ContractError(std::string(op) + ": number of scales must be >= 1");
  const std::size_t factor = std::size_t{1} << (scales - 1);
  if (shape.h % factor != 0 || shape.w % factor != 0) {
    throw DimensionError(std::string(op) + ": spatial size " + std::to_string(shape.h) + "x" +
                         std::to_string(shape.w) + " must be divisible by " + std::to_string(factor) +
                         " for " + std::to_string(scales) + " scales");
  }
}

template <typename Scalar>
void require_binary(const char* op, const Tensor<Scalar>& mask) {
  const auto& d = mask.data();
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (d[i] != Scalar(0) && d[i] != Scalar(1)) {
      throw ValidationError(std::string(op) + ": mask value " + std::to_string(static_cast<double>(d[i])) +
                            " at element " + std::to_string(i) + " is not binary");
    }
  }
}

template <typename Scalar>
ScalePyramid<Scalar> image_pyramid(const Tensor<Scalar>& image, int scales) {
  require_pyramid_divisible("image_pyramid", image.shape(), scales);
  ScalePyramid<Scalar> pyramid;
  pyramid.kind = PyramidKind::image;
  pyramid.levels.reserve(static_cast<std::size_t>(scales));
  pyramid.levels.push_back(image);
  for (int s = 1; s < scales; ++s) pyramid.levels.push_back(avg_pool2(pyramid.levels.back()));
  return pyramid;
}

template <typename Scalar>
ScalePyramid<Scalar> label_pyramid(const Tensor<Scalar>& mask, int scales) {
  require_pyramid_divisible("label_pyramid", mask.shape(), scales);
  require_binary("label_pyramid", mask);
  ScalePyramid<Scalar> pyramid;
  pyramid.kind = PyramidKind::label;
  pyramid.levels.reserve(static_cast<std::size_t>(scales));
  pyramid.levels.push_back(mask);
  for (int s = 1; s < scales; ++s) {
    Tensor<Scalar> level = avg_pool2(pyramid.levels.back());
    // Block means are multiples of 1/4, so the comparison is exact in both precisions.
    for (std::size_t i = 0; i < level.size(); ++i) level[i] = level[i] >= Scalar(0.5) ? Scalar(1) : Scalar(0);
    pyramid.levels.push_back(std::move(level));
  }
  return pyramid;
}

template void require_binary(const char*, const Tensor<float>&);
template void require_binary(const char*, const Tensor<double>&);
template ScalePyramid<float> image_pyramid(const Tensor<float>&, int);
template ScalePyramid<double> image_pyramid(const Tensor<double>&, int);
template ScalePyramid<float> label_pyramid(const Tensor<float>&, int);
template ScalePyramid<double> label_pyramid(const Tensor<double>&, int);

}  // namespace mimofan
