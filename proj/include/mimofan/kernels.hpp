#pragma once

#include <vector>

#include "mimofan/tensor.hpp"

namespace mimofan {

enum class Mode { train, eval };

/// Running statistics of one batch-norm layer. Both tensors have shape (1, C, 1, 1).
template <typename Scalar>
struct BatchNormState {
  Tensor<Scalar>* running_mean = nullptr;
  Tensor<Scalar>* running_var = nullptr;
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Forward kernels. Every kernel validates its inputs and returns a fresh tensor.

/// 2-D cross-correlation. `kernel` is (cout, cin, kh, kw); `bias` holds cout values in any shape.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      const Tensor<Scalar>& bias, int stride = 1, int pad = 0);

template <typename Scalar>
Tensor<Scalar> avg_pool2(const Tensor<Scalar>& input);

/// Doubles both spatial extents with half-pixel-centre bilinear sampling, clamped at borders.
template <typename Scalar>
Tensor<Scalar> upsample2_bilinear(const Tensor<Scalar>& input);

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& input);

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor);

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<const Tensor<Scalar>*>& parts);

template <typename Scalar>
Tensor<Scalar> softmax_channels(const Tensor<Scalar>& logits);

/// Normalised activations saved by the forward pass for the backward pass.
template <typename Scalar>
struct BatchNormCache {
  Tensor<Scalar> normalized;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> inv_std;
};

/// Batch normalisation over (n, h, w) per channel. In train mode the running
/// statistics in `state` are updated in place with momentum 0.1 (unbiased variance).
template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, BatchNormState<Scalar> state, Mode mode,
                          BatchNormCache<Scalar>* cache = nullptr);

// Backward kernels. Gradients are accumulated (+=) into the supplied buffers;
// a null buffer skips that gradient.

template <typename Scalar>
void conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                     const Tensor<Scalar>& grad_out, int stride, int pad,
                     typename Tensor<Scalar>::Array* grad_input,
                     typename Tensor<Scalar>::Array* grad_kernel,
                     typename Tensor<Scalar>::Array* grad_bias);

template <typename Scalar>
void avg_pool2_backward(const Tensor<Scalar>& grad_out, const Shape& input_shape,
                        typename Tensor<Scalar>::Array& grad_input);

template <typename Scalar>
void upsample2_bilinear_backward(const Tensor<Scalar>& grad_out, const Shape& input_shape,
                                 typename Tensor<Scalar>::Array& grad_input);

template <typename Scalar>
void softmax_channels_backward(const Tensor<Scalar>& probs, const Tensor<Scalar>& grad_out,
                               typename Tensor<Scalar>::Array& grad_input);

template <typename Scalar>
void batch_norm_backward(const BatchNormCache<Scalar>& cache, const Tensor<Scalar>& gamma,
                         const Tensor<Scalar>& grad_out, Mode mode,
                         typename Tensor<Scalar>::Array* grad_input,
                         typename Tensor<Scalar>::Array* grad_gamma,
                         typename Tensor<Scalar>::Array* grad_beta);

}  // namespace mimofan
