#include "mimofan/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace mimofan {

namespace {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  std::size_t cin, cout, kh, kw, oh, ow;
  int stride, pad;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Shape& in, const Shape& k, int stride, int pad) {
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (pad < 0) throw ContractError("conv2d: pad must be >= 0");
  require_dim("conv2d", "input-channel", k.c, in.c);
  const auto padded_h = static_cast<long>(in.h) + 2L * pad;
  const auto padded_w = static_cast<long>(in.w) + 2L * pad;
  if (padded_h < static_cast<long>(k.h)) throw DimensionError("conv2d: kernel height exceeds padded input height");
  if (padded_w < static_cast<long>(k.w)) throw DimensionError("conv2d: kernel width exceeds padded input width");
  ConvGeometry g{};
  g.cin = k.c;
  g.cout = k.n;
  g.kh = k.h;
  g.kw = k.w;
  g.oh = static_cast<std::size_t>((padded_h - static_cast<long>(k.h)) / stride + 1);
  g.ow = static_cast<std::size_t>((padded_w - static_cast<long>(k.w)) / stride + 1);
  g.stride = stride;
  g.pad = pad;
  return g;
}

// Unfolds one sample into a (cin*kh*kw) x (oh*ow) patch matrix.
template <typename Scalar>
void im2col(const Scalar* src, std::size_t h, std::size_t w, const ConvGeometry& g,
            RowMatrix<Scalar>& col) {
  col.resize(static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.pixels()));
  Eigen::Index row = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const Scalar* plane = src + ci * h * w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx, ++row) {
        Scalar* dst = col.row(row).data();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
          Scalar* out_row = dst + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill_n(out_row, g.ow, Scalar(0));
            continue;
          }
          const Scalar* in_row = plane + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
            out_row[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? Scalar(0)
                                                                 : in_row[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& col, std::size_t h, std::size_t w, const ConvGeometry& g,
                Scalar* dst) {
  Eigen::Index row = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    Scalar* plane = dst + ci * h * w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx, ++row) {
        const Scalar* src = col.row(row).data();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          Scalar* in_row = plane + static_cast<std::size_t>(iy) * w;
          const Scalar* col_row = src + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
            if (ix >= 0 && ix < static_cast<long>(w)) in_row[static_cast<std::size_t>(ix)] += col_row[ox];
          }
        }
      }
    }
  }
}

// Interpolation taps for one axis of a 2x half-pixel bilinear upsample.
struct Taps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

Taps upsample_taps(std::size_t length) {
  Taps taps;
  const std::size_t out = 2 * length;
  taps.lo.resize(out);
  taps.hi.resize(out);
  taps.frac.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(length - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    taps.lo[o] = lo;
    taps.hi[o] = std::min(lo + 1, length - 1);
    taps.frac[o] = src - static_cast<double>(lo);
  }
  return taps;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      const Tensor<Scalar>& bias, int stride, int pad) {
  const Shape& in = input.shape();
  const ConvGeometry g = conv_geometry(in, kernel.shape(), stride, pad);
  require_dim("conv2d", "bias", bias.size(), g.cout);

  Tensor<Scalar> out(Shape{in.n, g.cout, g.oh, g.ow});
  Eigen::Map<const RowMatrix<Scalar>> weights(kernel.ptr(), static_cast<Eigen::Index>(g.cout),
                                              static_cast<Eigen::Index>(g.patch()));
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> b(bias.ptr(), static_cast<Eigen::Index>(g.cout));
  RowMatrix<Scalar> col;
  for (std::size_t n = 0; n < in.n; ++n) {
    Eigen::Map<RowMatrix<Scalar>> dst(out.plane(n, 0), static_cast<Eigen::Index>(g.cout),
                                      static_cast<Eigen::Index>(g.pixels()));
    const bool pointwise = g.kh == 1 && g.kw == 1 && stride == 1 && pad == 0;
    if (pointwise) {
      Eigen::Map<const RowMatrix<Scalar>> src(input.plane(n, 0), static_cast<Eigen::Index>(g.cin),
                                              static_cast<Eigen::Index>(g.pixels()));
      dst.noalias() = weights * src;
    } else {
      im2col(input.plane(n, 0), in.h, in.w, g, col);
      dst.noalias() = weights * col;
    }
    dst.colwise() += b;
  }
  return out;
}

template <typename Scalar>
void conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                     const Tensor<Scalar>& grad_out, int stride, int pad,
                     typename Tensor<Scalar>::Array* grad_input,
                     typename Tensor<Scalar>::Array* grad_kernel,
                     typename Tensor<Scalar>::Array* grad_bias) {
  const Shape& in = input.shape();
  const ConvGeometry g = conv_geometry(in, kernel.shape(), stride, pad);
  const auto cout = static_cast<Eigen::Index>(g.cout);
  const auto patch = static_cast<Eigen::Index>(g.patch());
  const auto pixels = static_cast<Eigen::Index>(g.pixels());
  const bool pointwise = g.kh == 1 && g.kw == 1 && stride == 1 && pad == 0;

  Eigen::Map<const RowMatrix<Scalar>> weights(kernel.ptr(), cout, patch);
  RowMatrix<Scalar> col;
  RowMatrix<Scalar> dcol;
  for (std::size_t n = 0; n < in.n; ++n) {
    Eigen::Map<const RowMatrix<Scalar>> dout(grad_out.plane(n, 0), cout, pixels);
    if (grad_bias != nullptr) grad_bias->matrix() += dout.rowwise().sum();
    if (grad_kernel != nullptr) {
      Eigen::Map<RowMatrix<Scalar>> dw(grad_kernel->data(), cout, patch);
      if (pointwise) {
        Eigen::Map<const RowMatrix<Scalar>> src(input.plane(n, 0), patch, pixels);
        dw.noalias() += dout * src.transpose();
      } else {
        im2col(input.plane(n, 0), in.h, in.w, g, col);
        dw.noalias() += dout * col.transpose();
      }
    }
    if (grad_input != nullptr) {
      Scalar* dst = grad_input->data() + input.offset(n, 0, 0, 0);
      if (pointwise) {
        Eigen::Map<RowMatrix<Scalar>> dx(dst, patch, pixels);
        dx.noalias() += weights.transpose() * dout;
      } else {
        dcol.noalias() = weights.transpose() * dout;
        col2im_add(dcol, in.h, in.w, g, dst);
      }
    }
  }
}

template <typename Scalar>
Tensor<Scalar> avg_pool2(const Tensor<Scalar>& input) {
  const Shape& s = input.shape();
  if (s.h % 2 != 0) throw DimensionError("avg_pool2: height axis must be even (got " + std::to_string(s.h) + ")");
  if (s.w % 2 != 0) throw DimensionError("avg_pool2: width axis must be even (got " + std::to_string(s.w) + ")");
  Tensor<Scalar> out(Shape{s.n, s.c, s.h / 2, s.w / 2});
  const Scalar quarter(0.25);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const Scalar* src = input.plane(n, c);
      Scalar* dst = out.plane(n, c);
      for (std::size_t y = 0; y < s.h / 2; ++y) {
        const Scalar* r0 = src + 2 * y * s.w;
        const Scalar* r1 = r0 + s.w;
        for (std::size_t x = 0; x < s.w / 2; ++x) {
          dst[y * (s.w / 2) + x] = quarter * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
void avg_pool2_backward(const Tensor<Scalar>& grad_out, const Shape& s,
                        typename Tensor<Scalar>::Array& grad_input) {
  const Scalar quarter(0.25);
  const std::size_t ow = s.w / 2;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const Scalar* g = grad_out.plane(n, c);
      Scalar* dst = grad_input.data() + ((n * s.c + c) * s.h) * s.w;
      for (std::size_t y = 0; y < s.h; ++y) {
        for (std::size_t x = 0; x < s.w; ++x) dst[y * s.w + x] += quarter * g[(y / 2) * ow + x / 2];
      }
    }
  }
}

template <typename Scalar>
Tensor<Scalar> upsample2_bilinear(const Tensor<Scalar>& input) {
  const Shape& s = input.shape();
  const Taps ty = upsample_taps(s.h);
  const Taps tx = upsample_taps(s.w);
  Tensor<Scalar> out(Shape{s.n, s.c, 2 * s.h, 2 * s.w});
  const std::size_t oh = 2 * s.h;
  const std::size_t ow = 2 * s.w;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const Scalar* src = input.plane(n, c);
      Scalar* dst = out.plane(n, c);
      for (std::size_t y = 0; y < oh; ++y) {
        const Scalar fy = static_cast<Scalar>(ty.frac[y]);
        const Scalar* r0 = src + ty.lo[y] * s.w;
        const Scalar* r1 = src + ty.hi[y] * s.w;
        for (std::size_t x = 0; x < ow; ++x) {
          const Scalar fx = static_cast<Scalar>(tx.frac[x]);
          const Scalar top = (Scalar(1) - fx) * r0[tx.lo[x]] + fx * r0[tx.hi[x]];
          const Scalar bottom = (Scalar(1) - fx) * r1[tx.lo[x]] + fx * r1[tx.hi[x]];
          dst[y * ow + x] = (Scalar(1) - fy) * top + fy * bottom;
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
void upsample2_bilinear_backward(const Tensor<Scalar>& grad_out, const Shape& s,
                                 typename Tensor<Scalar>::Array& grad_input) {
  const Taps ty = upsample_taps(s.h);
  const Taps tx = upsample_taps(s.w);
  const std::size_t oh = 2 * s.h;
  const std::size_t ow = 2 * s.w;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const Scalar* g = grad_out.plane(n, c);
      Scalar* dst = grad_input.data() + ((n * s.c + c) * s.h) * s.w;
      for (std::size_t y = 0; y < oh; ++y) {
        const Scalar fy = static_cast<Scalar>(ty.frac[y]);
        Scalar* r0 = dst + ty.lo[y] * s.w;
        Scalar* r1 = dst + ty.hi[y] * s.w;
        for (std::size_t x = 0; x < ow; ++x) {
          const Scalar fx = static_cast<Scalar>(tx.frac[x]);
          const Scalar v = g[y * ow + x];
          r0[tx.lo[x]] += (Scalar(1) - fy) * (Scalar(1) - fx) * v;
          r0[tx.hi[x]] += (Scalar(1) - fy) * fx * v;
          r1[tx.lo[x]] += fy * (Scalar(1) - fx) * v;
          r1[tx.hi[x]] += fy * fx * v;
        }
      }
    }
  }
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& input) {
  return Tensor<Scalar>(input.shape(), input.data().max(Scalar(0)).eval());
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape("add", a.shape(), b.shape());
  return Tensor<Scalar>(a.shape(), (a.data() + b.data()).eval());
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  return Tensor<Scalar>(a.shape(), (a.data() * factor).eval());
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<const Tensor<Scalar>*>& parts) {
  if (parts.empty()) throw ContractError("concat_channels: no inputs");
  const Shape& first = parts.front()->shape();
  std::size_t channels = 0;
  for (const auto* p : parts) {
    require_dim("concat_channels", "batch", p->shape().n, first.n);
    require_dim("concat_channels", "height", p->shape().h, first.h);
    require_dim("concat_channels", "width", p->shape().w, first.w);
    channels += p->shape().c;
  }
  Tensor<Scalar> out(Shape{first.n, channels, first.h, first.w});
  for (std::size_t n = 0; n < first.n; ++n) {
    Scalar* dst = out.plane(n, 0);
    for (const auto* p : parts) {
      dst = std::copy_n(p->plane(n, 0), p->shape().c * first.plane(), dst);
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> softmax_channels(const Tensor<Scalar>& logits) {
  const Shape& s = logits.shape();
  Tensor<Scalar> out(s);
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    const Scalar* src = logits.plane(n, 0);
    Scalar* dst = out.plane(n, 0);
    for (std::size_t i = 0; i < plane; ++i) {
      Scalar peak = src[i];
      for (std::size_t c = 1; c < s.c; ++c) peak = std::max(peak, src[c * plane + i]);
      Scalar total(0);
      for (std::size_t c = 0; c < s.c; ++c) {
        const Scalar e = std::exp(src[c * plane + i] - peak);
        dst[c * plane + i] = e;
        total += e;
      }
      for (std::size_t c = 0; c < s.c; ++c) dst[c * plane + i] /= total;
    }
  }
  return out;
}

template <typename Scalar>
void softmax_channels_backward(const Tensor<Scalar>& probs, const Tensor<Scalar>& grad_out,
                               typename Tensor<Scalar>::Array& grad_input) {
  const Shape& s = probs.shape();
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    const Scalar* p = probs.plane(n, 0);
    const Scalar* g = grad_out.plane(n, 0);
    Scalar* dst = grad_input.data() + probs.offset(n, 0, 0, 0);
    for (std::size_t i = 0; i < plane; ++i) {
      Scalar dot(0);
      for (std::size_t c = 0; c < s.c; ++c) dot += g[c * plane + i] * p[c * plane + i];
      for (std::size_t c = 0; c < s.c; ++c) {
        dst[c * plane + i] += p[c * plane + i] * (g[c * plane + i] - dot);
      }
    }
  }
}

template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, BatchNormState<Scalar> state, Mode mode,
                          BatchNormCache<Scalar>* cache) {
  const Shape& s = input.shape();
  require_dim("batch_norm", "gamma", gamma.size(), s.c);
  require_dim("batch_norm", "beta", beta.size(), s.c);
  if (state.running_mean == nullptr || state.running_var == nullptr) {
    throw ContractError("batch_norm: running statistics not provided");
  }
  require_dim("batch_norm", "running-mean", state.running_mean->size(), s.c);
  require_dim("batch_norm", "running-var", state.running_var->size(), s.c);

  const Scalar eps(kBatchNormEpsilon);
  const Scalar momentum(kBatchNormMomentum);
  const std::size_t plane = s.plane();
  const std::size_t count = s.n * plane;

  Tensor<Scalar> out(s);
  Tensor<Scalar> normalized(s);
  Eigen::Array<Scalar, Eigen::Dynamic, 1> inv_std(static_cast<Eigen::Index>(s.c));
  for (std::size_t c = 0; c < s.c; ++c) {
    Scalar mean;
    Scalar var;
    if (mode == Mode::train) {
      Scalar total(0);
      for (std::size_t n = 0; n < s.n; ++n) {
        const Scalar* src = input.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) total += src[i];
      }
      mean = total / static_cast<Scalar>(count);
      Scalar sq(0);
      for (std::size_t n = 0; n < s.n; ++n) {
        const Scalar* src = input.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          const Scalar d = src[i] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<Scalar>(count);
      const Scalar unbiased = count > 1 ? sq / static_cast<Scalar>(count - 1) : var;
      (*state.running_mean)[c] = (Scalar(1) - momentum) * (*state.running_mean)[c] + momentum * mean;
      (*state.running_var)[c] = (Scalar(1) - momentum) * (*state.running_var)[c] + momentum * unbiased;
    } else {
      mean = (*state.running_mean)[c];
      var = (*state.running_var)[c];
    }
    const Scalar istd = Scalar(1) / std::sqrt(var + eps);
    inv_std[static_cast<Eigen::Index>(c)] = istd;
    const Scalar g = gamma[c];
    const Scalar b = beta[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      const Scalar* src = input.plane(n, c);
      Scalar* xhat = normalized.plane(n, c);
      Scalar* dst = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        xhat[i] = (src[i] - mean) * istd;
        dst[i] = g * xhat[i] + b;
      }
    }
  }
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

template <typename Scalar>
void batch_norm_backward(const BatchNormCache<Scalar>& cache, const Tensor<Scalar>& gamma,
                         const Tensor<Scalar>& grad_out, Mode mode,
                         typename Tensor<Scalar>::Array* grad_input,
                         typename Tensor<Scalar>::Array* grad_gamma,
                         typename Tensor<Scalar>::Array* grad_beta) {
  const Shape& s = grad_out.shape();
  const std::size_t plane = s.plane();
  const auto count = static_cast<Scalar>(s.n * plane);
  for (std::size_t c = 0; c < s.c; ++c) {
    Scalar sum_dy(0);
    Scalar sum_dy_xhat(0);
    for (std::size_t n = 0; n < s.n; ++n) {
      const Scalar* dy = grad_out.plane(n, c);
      const Scalar* xhat = cache.normalized.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += dy[i] * xhat[i];
      }
    }
    if (grad_gamma != nullptr) (*grad_gamma)[static_cast<Eigen::Index>(c)] += sum_dy_xhat;
    if (grad_beta != nullptr) (*grad_beta)[static_cast<Eigen::Index>(c)] += sum_dy;
    if (grad_input == nullptr) continue;
    const Scalar g = gamma[c];
    const Scalar istd = cache.inv_std[static_cast<Eigen::Index>(c)];
    for (std::size_t n = 0; n < s.n; ++n) {
      const Scalar* dy = grad_out.plane(n, c);
      const Scalar* xhat = cache.normalized.plane(n, c);
      Scalar* dx = grad_input->data() + grad_out.offset(n, c, 0, 0);
      if (mode == Mode::train) {
        const Scalar k = g * istd / count;
        for (std::size_t i = 0; i < plane; ++i) {
          dx[i] += k * (count * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
        }
      } else {
        for (std::size_t i = 0; i < plane; ++i) dx[i] += g * istd * dy[i];
      }
    }
  }
}

#define MIMOFAN_INSTANTIATE_KERNELS(S)                                                             \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int);      \
  template void conv2d_backward(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int,    \
                                Tensor<S>::Array*, Tensor<S>::Array*, Tensor<S>::Array*);          \
  template Tensor<S> avg_pool2(const Tensor<S>&);                                                  \
  template void avg_pool2_backward(const Tensor<S>&, const Shape&, Tensor<S>::Array&);             \
  template Tensor<S> upsample2_bilinear(const Tensor<S>&);                                         \
  template void upsample2_bilinear_backward(const Tensor<S>&, const Shape&, Tensor<S>::Array&);    \
  template Tensor<S> relu(const Tensor<S>&);                                                       \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                      \
  template Tensor<S> scale(const Tensor<S>&, S);                                                   \
  template Tensor<S> concat_channels(const std::vector<const Tensor<S>*>&);                        \
  template Tensor<S> softmax_channels(const Tensor<S>&);                                           \
  template void softmax_channels_backward(const Tensor<S>&, const Tensor<S>&, Tensor<S>::Array&);  \
  template Tensor<S> batch_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,              \
                                BatchNormState<S>, Mode, BatchNormCache<S>*);                      \
  template void batch_norm_backward(const BatchNormCache<S>&, const Tensor<S>&, const Tensor<S>&,  \
                                    Mode, Tensor<S>::Array*, Tensor<S>::Array*, Tensor<S>::Array*);

MIMOFAN_INSTANTIATE_KERNELS(float)
MIMOFAN_INSTANTIATE_KERNELS(double)

#undef MIMOFAN_INSTANTIATE_KERNELS

}  // namespace mimofan
