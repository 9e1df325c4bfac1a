#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mimofan/autograd.hpp"
#include "mimofan/pyramid.hpp"
#include "mimofan/tensor.hpp"

namespace mimofan {

enum class Arch { mimofan, unet, resunet };

std::string to_string(Arch arch);
/// Accepts "mimofan", "unet" and "resunet"; throws UsageError otherwise.
Arch parse_arch(const std::string& name);

/// Feature switches of the multi-scale network. Baselines ignore them.
struct Toggles {
  bool dcc = true;  ///< dense cross-scale connections
  bool dps = true;  ///< supervise every output scale
  bool sf = true;   ///< fuse the two finest probability maps at inference

  bool operator==(const Toggles&) const = default;
};

struct NetworkConfig {
  Arch arch = Arch::mimofan;
  int scales = kDefaultScales;
  int base_filters = 16;
  int classes = 2;
  Toggles toggles;

  /// Throws ConfigError when an invariant is violated (scales >= 2, filters >= 1, classes == 2).
  void validate() const;

  /// Channel count at encoder/decoder depth d: F * 2^min(d, 4).
  int channels(int depth) const;

  /// Canonical `key=value` lines, used verbatim in checkpoints.
  std::string canonical() const;
  static NetworkConfig parse(const std::string& canonical);

  bool operator==(const NetworkConfig&) const = default;
};

/// Named parameters of one architecture variant plus batch-norm running statistics.
///
/// Parameters are named by layer path, e.g. `enc.d2.s3.conv1.weight`. The
/// depth-0 block of the multi-scale network lives under `enc.d0.shared` and is
/// reused by every input scale.
template <typename Scalar>
struct ModelParams {
  NetworkConfig config;
  std::map<std::string, Tensor<Scalar>> params;
  std::map<std::string, Tensor<Scalar>> buffers;

  Tensor<Scalar>& param(const std::string& name);
  const Tensor<Scalar>& param(const std::string& name) const;
  Tensor<Scalar>& buffer(const std::string& name);

  /// Number of trainable scalars.
  std::size_t parameter_count() const;
  void zero_grad();

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out;
    out.config = config;
    for (const auto& [name, t] : params) {
      auto c = t.template cast<Other>();
      c.set_requires_grad(true);
      out.params.emplace(name, std::move(c));
    }
    for (const auto& [name, t] : buffers) out.buffers.emplace(name, t.template cast<Other>());
    return out;
  }
};

/// He-normal convolution weights from a seeded generator; zero biases; unit gamma, zero beta.
template <typename Scalar>
ModelParams<Scalar> build(const NetworkConfig& config, std::uint64_t seed);

struct ForwardOptions {
  Mode mode = Mode::train;
  /// Replace every cross-scale input by zeros (diagnostic; requires dcc).
  bool zero_cross_scale = false;
};

/// Multi-scale forward pass on a tape. `inputs` holds the S image-pyramid
/// levels; the result holds S two-channel probability maps, level s at input
/// size / 2^s.
template <typename Scalar>
std::vector<Var<Scalar>> forward_mimofan(Tape<Scalar>& tape, ModelParams<Scalar>& params,
                                         const std::vector<Var<Scalar>>& inputs,
                                         const ForwardOptions& options = {});

template <typename Scalar>
ScalePyramid<Scalar> forward_mimofan(ModelParams<Scalar>& params, const ScalePyramid<Scalar>& pyramid,
                                     Mode mode = Mode::eval);

/// Single-output U-Net / ResU-Net forward pass; returns a (n, 2, h, w) probability map.
template <typename Scalar>
Var<Scalar> forward_baseline(Tape<Scalar>& tape, ModelParams<Scalar>& params, const Var<Scalar>& image,
                             Arch arch, Mode mode = Mode::train);

template <typename Scalar>
Tensor<Scalar> forward_baseline(ModelParams<Scalar>& params, const Tensor<Scalar>& image, Arch arch,
                                Mode mode = Mode::eval);

/// Mean of `p0` and the bilinear upsampling of the half-size map `p1`.
template <typename Scalar>
Tensor<Scalar> scale_fuse(const Tensor<Scalar>& p0, const Tensor<Scalar>& p1);

template <typename Scalar>
Var<Scalar> scale_fuse(const Var<Scalar>& p0, const Var<Scalar>& p1);

/// Per-voxel argmax of a two-channel probability map as a (n, 1, h, w) mask; ties go to background.
template <typename Scalar>
Tensor<Scalar> predict_mask(const Tensor<Scalar>& prob);

/// Full-resolution probability map used for evaluation: the scale-0 head, or
/// the fused map when scale fusing is enabled; the single output for baselines.
template <typename Scalar>
Tensor<Scalar> predict_probability(ModelParams<Scalar>& params, const Tensor<Scalar>& image,
                                   Mode mode = Mode::eval);

/// Shortest and longest number of conv2d nodes on any tape path from `source` to `sink`.
struct ConvDepth {
  int shortest = -1;
  int longest = -1;
  bool reachable() const { return longest >= 0; }
};

template <typename Scalar>
ConvDepth conv_depth(const Tape<Scalar>& tape, std::size_t source, std::size_t sink);

extern template struct ModelParams<float>;
extern template struct ModelParams<double>;

}  // namespace mimofan
