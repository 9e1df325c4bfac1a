#include "mimofan/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "mimofan/kernels.hpp"

namespace mimofan {

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::mimofan:
      return "mimofan";
    case Arch::unet:
      return "unet";
    case Arch::resunet:
      return "resunet";
  }
  return "unknown";
}

Arch parse_arch(const std::string& name) {
  if (name == "mimofan") return Arch::mimofan;
  if (name == "unet") return Arch::unet;
  if (name == "resunet") return Arch::resunet;
  throw UsageError("unknown architecture '" + name + "' (expected mimofan, unet or resunet)");
}

void NetworkConfig::validate() const {
  if (scales < 2) throw ConfigError("network: scales must be >= 2");
  if (scales > 12) throw ConfigError("network: scales must be <= 12");
  if (base_filters < 1) throw ConfigError("network: base filters must be >= 1");
  if (classes != 2) throw ConfigError("network: exactly 2 classes are supported");
}

int NetworkConfig::channels(int depth) const { return base_filters << std::min(depth, 4); }

std::string NetworkConfig::canonical() const {
  std::ostringstream out;
  out << "arch=" << to_string(arch) << '\n'
      << "scales=" << scales << '\n'
      << "filters=" << base_filters << '\n'
      << "classes=" << classes << '\n'
      << "dcc=" << (toggles.dcc ? 1 : 0) << '\n'
      << "dps=" << (toggles.dps ? 1 : 0) << '\n'
      << "sf=" << (toggles.sf ? 1 : 0) << '\n';
  return out.str();
}

NetworkConfig NetworkConfig::parse(const std::string& canonical) {
  NetworkConfig config;
  std::istringstream in(canonical);
  std::string line;
  auto as_int = [](const std::string& key, const std::string& value) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config: invalid integer for '" + key + "': " + value);
    }
  };
  auto as_flag = [&](const std::string& key, const std::string& value) {
    const int v = as_int(key, value);
    if (v != 0 && v != 1) throw ConfigError("config: '" + key + "' must be 0 or 1");
    return v == 1;
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "arch") {
      try {
        config.arch = parse_arch(value);
      } catch (const UsageError& e) {
        throw ConfigError(std::string("config: ") + e.what());
      }
    } else if (key == "scales") {
      config.scales = as_int(key, value);
    } else if (key == "filters") {
      config.base_filters = as_int(key, value);
    } else if (key == "classes") {
      config.classes = as_int(key, value);
    } else if (key == "dcc") {
      config.toggles.dcc = as_flag(key, value);
    } else if (key == "dps") {
      config.toggles.dps = as_flag(key, value);
    } else if (key == "sf") {
      config.toggles.sf = as_flag(key, value);
    } else {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }
  config.validate();
  return config;
}

template <typename Scalar>
Tensor<Scalar>& ModelParams<Scalar>::param(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("model: missing parameter '" + name + "'");
  return it->second;
}

template <typename Scalar>
const Tensor<Scalar>& ModelParams<Scalar>::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("model: missing parameter '" + name + "'");
  return it->second;
}

template <typename Scalar>
Tensor<Scalar>& ModelParams<Scalar>::buffer(const std::string& name) {
  auto it = buffers.find(name);
  if (it == buffers.end()) throw ConfigError("model: missing buffer '" + name + "'");
  return it->second;
}

template <typename Scalar>
std::size_t ModelParams<Scalar>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : params) total += t.size();
  return total;
}

template <typename Scalar>
void ModelParams<Scalar>::zero_grad() {
  for (auto& [name, t] : params) t.zero_grad();
}

namespace {

std::string enc_name(int d, int s) { return "enc.d" + std::to_string(d) + ".s" + std::to_string(s); }
std::string dec_name(int d, int s) { return "dec.d" + std::to_string(d) + ".s" + std::to_string(s); }
std::string head_name(int s) { return "head.s" + std::to_string(s); }
constexpr const char* kSharedBlock = "enc.d0.shared";

// Convolution block: conv3x3-bn-relu, conv3x3-bn, optional residual from the
// own-path inputs, relu. Cross-scale inputs only feed the first convolution.
struct BlockLayout {
  std::string name;
  int own_in = 0;
  int cross_in = 0;
  int out = 0;
  bool residual = false;
  bool projection() const { return residual && own_in != out; }
};

struct HeadLayout {
  std::string name;
  int in = 0;
  int out = 0;
};

struct Layout {
  std::vector<BlockLayout> blocks;
  std::vector<HeadLayout> heads;
};

Layout make_layout(const NetworkConfig& config) {
  config.validate();
  Layout layout;
  const int S = config.scales;
  auto C = [&](int d) { return config.channels(d); };
  if (config.arch == Arch::mimofan) {
    const bool dcc = config.toggles.dcc;
    layout.blocks.push_back({kSharedBlock, 1, 0, C(0), true});
    for (int d = 1; d < S; ++d) {
      for (int s = d; s < S; ++s) {
        const int finer = s - d + 1;
        layout.blocks.push_back({enc_name(d, s), C(d - 1), dcc ? finer * C(d - 1) : 0, C(d), true});
      }
    }
    for (int d = S - 2; d >= 0; --d) {
      for (int s = d; s < S; ++s) {
        const int own = C(d) + (s >= d + 1 ? C(d + 1) : 0);
        const int coarser = S - s - 1;
        layout.blocks.push_back({dec_name(d, s), own, dcc ? coarser * C(d + 1) : 0, C(d), true});
      }
    }
    for (int s = 0; s < S; ++s) layout.heads.push_back({head_name(s), C(0), config.classes});
  } else {
    const bool residual = config.arch == Arch::resunet;
    layout.blocks.push_back({"enc.d0", 1, 0, C(0), residual});
    for (int d = 1; d < S; ++d) layout.blocks.push_back({"enc.d" + std::to_string(d), C(d - 1), 0, C(d), residual});
    for (int d = S - 2; d >= 0; --d) {
      layout.blocks.push_back({"dec.d" + std::to_string(d), C(d) + C(d + 1), 0, C(d), residual});
    }
    layout.heads.push_back({"head", C(0), config.classes});
  }
  return layout;
}

template <typename Scalar>
void add_conv(ModelParams<Scalar>& model, const std::string& name, int cout, int cin, int k) {
  Tensor<Scalar> weight(Shape{static_cast<std::size_t>(cout), static_cast<std::size_t>(cin),
                              static_cast<std::size_t>(k), static_cast<std::size_t>(k)});
  Tensor<Scalar> bias(Shape{1, static_cast<std::size_t>(cout), 1, 1});
  weight.set_requires_grad(true);
  bias.set_requires_grad(true);
  model.params.emplace(name + ".weight", std::move(weight));
  model.params.emplace(name + ".bias", std::move(bias));
}

template <typename Scalar>
void add_bn(ModelParams<Scalar>& model, const std::string& name, int channels) {
  const Shape s{1, static_cast<std::size_t>(channels), 1, 1};
  Tensor<Scalar> gamma(s, Scalar(1));
  Tensor<Scalar> beta(s, Scalar(0));
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
  model.params.emplace(name + ".gamma", std::move(gamma));
  model.params.emplace(name + ".beta", std::move(beta));
  model.buffers.emplace(name + ".running_mean", Tensor<Scalar>(s, Scalar(0)));
  model.buffers.emplace(name + ".running_var", Tensor<Scalar>(s, Scalar(1)));
}

template <typename Scalar>
Var<Scalar> conv_layer(Tape<Scalar>& tape, ModelParams<Scalar>& model, const std::string& name,
                       const Var<Scalar>& x, int pad) {
  return conv2d(x, tape.parameter(model.param(name + ".weight")), tape.parameter(model.param(name + ".bias")), 1,
                pad);
}

template <typename Scalar>
Var<Scalar> bn_layer(Tape<Scalar>& tape, ModelParams<Scalar>& model, const std::string& name,
                     const Var<Scalar>& x, Mode mode) {
  BatchNormState<Scalar> state{&model.buffer(name + ".running_mean"), &model.buffer(name + ".running_var")};
  return batch_norm(x, tape.parameter(model.param(name + ".gamma")), tape.parameter(model.param(name + ".beta")),
                    state, mode);
}

template <typename Scalar>
Var<Scalar> join(const std::vector<Var<Scalar>>& parts) {
  return parts.size() == 1 ? parts.front() : concat_channels(parts);
}

template <typename Scalar>
Var<Scalar> run_block(Tape<Scalar>& tape, ModelParams<Scalar>& model, const std::string& name,
                      const std::vector<Var<Scalar>>& own, const std::vector<Var<Scalar>>& cross,
                      bool residual, Mode mode) {
  const Var<Scalar> own_input = join(own);
  std::vector<Var<Scalar>> all = own;
  all.insert(all.end(), cross.begin(), cross.end());
  const Var<Scalar> input = join(all);

  Var<Scalar> h = relu(bn_layer(tape, model, name + ".bn1", conv_layer(tape, model, name + ".conv1", input, 1), mode));
  h = bn_layer(tape, model, name + ".bn2", conv_layer(tape, model, name + ".conv2", h, 1), mode);
  if (residual) {
    const bool projected = model.params.count(name + ".proj.weight") != 0;
    const Var<Scalar> skip = projected ? conv_layer(tape, model, name + ".proj", own_input, 0) : own_input;
    h = add(h, skip);
  }
  return relu(h);
}

template <typename Scalar>
Var<Scalar> pool_times(Var<Scalar> x, int times) {
  for (int i = 0; i < times; ++i) x = avg_pool2(x);
  return x;
}

template <typename Scalar>
Var<Scalar> upsample_times(Var<Scalar> x, int times) {
  for (int i = 0; i < times; ++i) x = upsample2_bilinear(x);
  return x;
}

template <typename Scalar>
Var<Scalar> head_layer(Tape<Scalar>& tape, ModelParams<Scalar>& model, const std::string& name,
                       const Var<Scalar>& x) {
  return softmax_channels(conv_layer(tape, model, name, x, 0));
}

}  // namespace

template <typename Scalar>
ModelParams<Scalar> build(const NetworkConfig& config, std::uint64_t seed) {
  const Layout layout = make_layout(config);
  ModelParams<Scalar> model;
  model.config = config;
  for (const auto& block : layout.blocks) {
    add_conv(model, block.name + ".conv1", block.out, block.own_in + block.cross_in, 3);
    add_bn(model, block.name + ".bn1", block.out);
    add_conv(model, block.name + ".conv2", block.out, block.out, 3);
    add_bn(model, block.name + ".bn2", block.out);
    if (block.projection()) add_conv(model, block.name + ".proj", block.out, block.own_in, 1);
  }
  for (const auto& head : layout.heads) add_conv(model, head.name, head.out, head.in, 1);

  std::mt19937_64 rng(seed);
  for (auto& [name, t] : model.params) {
    if (name.size() < 7 || name.compare(name.size() - 7, 7, ".weight") != 0) continue;
    const Shape& s = t.shape();
    const double fan_in = static_cast<double>(s.c * s.h * s.w);
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(normal(rng));
  }
  return model;
}

template <typename Scalar>
std::vector<Var<Scalar>> forward_mimofan(Tape<Scalar>& tape, ModelParams<Scalar>& model,
                                         const std::vector<Var<Scalar>>& inputs, const ForwardOptions& options) {
  const NetworkConfig& config = model.config;
  if (config.arch != Arch::mimofan) throw ConfigError("forward_mimofan: parameters are for " + to_string(config.arch));
  const int S = config.scales;
  if (static_cast<int>(inputs.size()) != S) {
    throw ConfigError("forward_mimofan: pyramid has " + std::to_string(inputs.size()) + " levels, parameters expect " +
                      std::to_string(S));
  }
  if (options.zero_cross_scale && !config.toggles.dcc) {
    throw ContractError("forward_mimofan: zero_cross_scale requires dense cross-scale connections");
  }
  const Shape base = inputs.front().shape();
  require_dim("forward_mimofan", "channel", base.c, 1);
  for (int s = 1; s < S; ++s) {
    const Shape& level = inputs[static_cast<std::size_t>(s)].shape();
    require_dim("forward_mimofan", "batch", level.n, base.n);
    require_dim("forward_mimofan", "channel", level.c, 1);
    require_dim("forward_mimofan", "height", level.h, base.h >> s);
    require_dim("forward_mimofan", "width", level.w, base.w >> s);
    if ((base.h >> s) << s != base.h || (base.w >> s) << s != base.w) {
      throw DimensionError("forward_mimofan: input size must be divisible by 2^(S-1)");
    }
  }

  const bool dcc = config.toggles.dcc;
  const Mode mode = options.mode;
  auto cross_input = [&](Var<Scalar> v) {
    return options.zero_cross_scale ? tape.constant(Tensor<Scalar>(v.shape())) : v;
  };

  // enc[d][s] and dec[d][s] exist for s >= d.
  std::vector<std::vector<Var<Scalar>>> enc(S, std::vector<Var<Scalar>>(S));
  std::vector<std::vector<Var<Scalar>>> dec(S, std::vector<Var<Scalar>>(S));
  for (int s = 0; s < S; ++s) {
    enc[0][s] = run_block(tape, model, kSharedBlock, {inputs[static_cast<std::size_t>(s)]}, {}, true, mode);
  }
  for (int d = 1; d < S; ++d) {
    for (int s = d; s < S; ++s) {
      std::vector<Var<Scalar>> cross;
      if (dcc) {
        for (int f = d - 1; f < s; ++f) cross.push_back(cross_input(pool_times(enc[d - 1][f], s - f)));
      }
      enc[d][s] = run_block(tape, model, enc_name(d, s), {enc[d - 1][s]}, cross, true, mode);
    }
  }
  dec[S - 1][S - 1] = enc[S - 1][S - 1];
  for (int d = S - 2; d >= 0; --d) {
    for (int s = d; s < S; ++s) {
      std::vector<Var<Scalar>> own{enc[d][s]};
      if (s >= d + 1) own.push_back(dec[d + 1][s]);
      std::vector<Var<Scalar>> cross;
      if (dcc) {
        for (int c = std::max(s + 1, d + 1); c < S; ++c) {
          cross.push_back(cross_input(upsample_times(dec[d + 1][c], c - s)));
        }
      }
      dec[d][s] = run_block(tape, model, dec_name(d, s), own, cross, true, mode);
    }
  }
  std::vector<Var<Scalar>> outputs;
  outputs.reserve(static_cast<std::size_t>(S));
  for (int s = 0; s < S; ++s) outputs.push_back(head_layer(tape, model, head_name(s), dec[0][s]));
  return outputs;
}

template <typename Scalar>
ScalePyramid<Scalar> forward_mimofan(ModelParams<Scalar>& params, const ScalePyramid<Scalar>& pyramid, Mode mode) {
  Tape<Scalar> tape;
  std::vector<Var<Scalar>> inputs;
  for (const auto& level : pyramid.levels) inputs.push_back(tape.constant(level));
  ForwardOptions options;
  options.mode = mode;
  const auto outputs = forward_mimofan(tape, params, inputs, options);
  ScalePyramid<Scalar> result;
  result.kind = PyramidKind::probability;
  for (const auto& out : outputs) result.levels.push_back(out.value());
  return result;
}

template <typename Scalar>
Var<Scalar> forward_baseline(Tape<Scalar>& tape, ModelParams<Scalar>& model, const Var<Scalar>& image, Arch arch,
                             Mode mode) {
  const NetworkConfig& config = model.config;
  if (arch == Arch::mimofan) throw ConfigError("forward_baseline: expected unet or resunet");
  if (config.arch != arch) {
    throw ConfigError("forward_baseline: parameters are for " + to_string(config.arch) + ", requested " +
                      to_string(arch));
  }
  const int S = config.scales;
  require_dim("forward_baseline", "channel", image.shape().c, 1);
  require_pyramid_divisible("forward_baseline", image.shape(), S);
  const bool residual = arch == Arch::resunet;

  std::vector<Var<Scalar>> enc(static_cast<std::size_t>(S));
  enc[0] = run_block(tape, model, "enc.d0", {image}, {}, residual, mode);
  for (int d = 1; d < S; ++d) {
    enc[d] = run_block(tape, model, "enc.d" + std::to_string(d), {avg_pool2(enc[d - 1])}, {}, residual, mode);
  }
  Var<Scalar> x = enc[S - 1];
  for (int d = S - 2; d >= 0; --d) {
    x = run_block(tape, model, "dec.d" + std::to_string(d), {enc[d], upsample2_bilinear(x)}, {}, residual, mode);
  }
  return head_layer(tape, model, "head", x);
}

template <typename Scalar>
Tensor<Scalar> forward_baseline(ModelParams<Scalar>& params, const Tensor<Scalar>& image, Arch arch, Mode mode) {
  Tape<Scalar> tape;
  return forward_baseline(tape, params, tape.constant(image), arch, mode).value();
}

namespace {

void check_fuse_shapes(const Shape& p0, const Shape& p1) {
  require_dim("scale_fuse", "channel", p0.c, 2);
  require_dim("scale_fuse", "channel", p1.c, 2);
  require_dim("scale_fuse", "batch", p1.n, p0.n);
  require_dim("scale_fuse", "height", 2 * p1.h, p0.h);
  require_dim("scale_fuse", "width", 2 * p1.w, p0.w);
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> scale_fuse(const Tensor<Scalar>& p0, const Tensor<Scalar>& p1) {
  check_fuse_shapes(p0.shape(), p1.shape());
  return scale(add(p0, upsample2_bilinear(p1)), Scalar(0.5));
}

template <typename Scalar>
Var<Scalar> scale_fuse(const Var<Scalar>& p0, const Var<Scalar>& p1) {
  check_fuse_shapes(p0.shape(), p1.shape());
  return scale(add(p0, upsample2_bilinear(p1)), Scalar(0.5));
}

template <typename Scalar>
Tensor<Scalar> predict_mask(const Tensor<Scalar>& prob) {
  const Shape& s = prob.shape();
  require_dim("predict_mask", "channel", s.c, 2);
  Tensor<Scalar> mask(Shape{s.n, 1, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    const Scalar* bg = prob.plane(n, 0);
    const Scalar* fg = prob.plane(n, 1);
    Scalar* dst = mask.plane(n, 0);
    for (std::size_t i = 0; i < s.plane(); ++i) dst[i] = fg[i] > bg[i] ? Scalar(1) : Scalar(0);
  }
  return mask;
}

template <typename Scalar>
Tensor<Scalar> predict_probability(ModelParams<Scalar>& params, const Tensor<Scalar>& image, Mode mode) {
  if (params.config.arch != Arch::mimofan) return forward_baseline(params, image, params.config.arch, mode);
  const ScalePyramid<Scalar> outputs = forward_mimofan(params, image_pyramid(image, params.config.scales), mode);
  return params.config.toggles.sf ? scale_fuse(outputs[0], outputs[1]) : outputs[0];
}

template <typename Scalar>
ConvDepth conv_depth(const Tape<Scalar>& tape, std::size_t source, std::size_t sink) {
  if (source >= tape.size() || sink >= tape.size()) throw ContractError("conv_depth: node id out of range");
  constexpr int kUnreached = -1;
  std::vector<int> shortest(tape.size(), kUnreached);
  std::vector<int> longest(tape.size(), kUnreached);
  shortest[source] = longest[source] = 0;
  for (std::size_t i = source + 1; i <= sink; ++i) {
    const auto& node = tape.node(i);
    const int step = node.op == "conv2d" ? 1 : 0;
    for (std::size_t in : node.inputs) {
      if (longest[in] == kUnreached) continue;
      longest[i] = std::max(longest[i], longest[in] + step);
      shortest[i] = shortest[i] == kUnreached ? shortest[in] + step : std::min(shortest[i], shortest[in] + step);
    }
  }
  return ConvDepth{shortest[sink], longest[sink]};
}

template struct ModelParams<float>;
template struct ModelParams<double>;

#define MIMOFAN_INSTANTIATE_NETWORK(S)                                                                          \
  template ModelParams<S> build(const NetworkConfig&, std::uint64_t);                                          \
  template std::vector<Var<S>> forward_mimofan(Tape<S>&, ModelParams<S>&, const std::vector<Var<S>>&,          \
                                               const ForwardOptions&);                                         \
  template ScalePyramid<S> forward_mimofan(ModelParams<S>&, const ScalePyramid<S>&, Mode);                     \
  template Var<S> forward_baseline(Tape<S>&, ModelParams<S>&, const Var<S>&, Arch, Mode);                      \
  template Tensor<S> forward_baseline(ModelParams<S>&, const Tensor<S>&, Arch, Mode);                          \
  template Tensor<S> scale_fuse(const Tensor<S>&, const Tensor<S>&);                                           \
  template Var<S> scale_fuse(const Var<S>&, const Var<S>&);                                                    \
  template Tensor<S> predict_mask(const Tensor<S>&);                                                           \
  template Tensor<S> predict_probability(ModelParams<S>&, const Tensor<S>&, Mode);                             \
  template ConvDepth conv_depth(const Tape<S>&, std::size_t, std::size_t);

MIMOFAN_INSTANTIATE_NETWORK(float)
MIMOFAN_INSTANTIATE_NETWORK(double)

#undef MIMOFAN_INSTANTIATE_NETWORK

}  // namespace mimofan
