#include "mimofan/gradcheck.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <random>

#include "mimofan/loss_metrics.hpp"
#include "mimofan/network.hpp"
#include "mimofan/pyramid.hpp"
#include "mimofan/training.hpp"

namespace mimofan {

namespace {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(numeric) + 1e-8);
}

double evaluate(const ScalarFunction& f, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  return f(tape, vars).value()[0];
}

class Random {
 public:
  explicit Random(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  std::size_t pick(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }

  Tensor<double> tensor(const Shape& shape, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = uniform(lo, hi);
    return t;
  }

  // Values with magnitude in [margin, 1], random sign; keeps relu away from its kink.
  Tensor<double> away_from_zero(const Shape& shape, double margin) {
    Tensor<double> t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double magnitude = uniform(margin, 1.0);
      t[i] = uniform(0.0, 1.0) < 0.5 ? -magnitude : magnitude;
    }
    return t;
  }

  Tensor<double> binary(const Shape& shape) {
    Tensor<double> t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = uniform(0.0, 1.0) < 0.5 ? 0.0 : 1.0;
    return t;
  }

  Shape shape(bool even_spatial) {
    auto side = [&] { return even_spatial ? 2 * pick(1, 3) : pick(2, 6); };
    return Shape{pick(1, 4), pick(1, 4), side(), side()};
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

Tensor<double> softmax_of_random(Random& rnd, const Shape& shape) {
  return softmax_channels(rnd.tensor(shape, -2.0, 2.0));
}

struct CheckCase {
  ScalarFunction f;
  std::vector<Tensor<double>> inputs;
};

// Builds one randomised instance of the named primitive check.
CheckCase make_case(const std::string& name, Random& rnd) {
  CheckCase c;
  if (name == "conv2d") {
    const Shape x = rnd.shape(false);
    const std::size_t k = rnd.pick(1, std::min<std::size_t>(3, std::min(x.h, x.w)));
    const int stride = static_cast<int>(rnd.pick(1, 2));
    const int pad = static_cast<int>(rnd.pick(0, 1));
    const std::size_t cout = rnd.pick(1, 4);
    c.inputs = {rnd.tensor(x), rnd.tensor(Shape{cout, x.c, k, k}), rnd.tensor(Shape{1, cout, 1, 1})};
    const Tensor<double> probe = rnd.tensor(conv2d(c.inputs[0], c.inputs[1], c.inputs[2], stride, pad).shape());
    c.f = [probe, stride, pad](Tape<double>&, const std::vector<Var<double>>& v) {
      return weighted_sum(conv2d(v[0], v[1], v[2], stride, pad), probe);
    };
  } else if (name == "avg_pool2") {
    c.inputs = {rnd.tensor(rnd.shape(true))};
    const Tensor<double> probe = rnd.tensor(avg_pool2(c.inputs[0]).shape());
    c.f = [probe](Tape<double>&, const std::vector<Var<double>>& v) { return weighted_sum(avg_pool2(v[0]), probe); };
  } else if (name == "upsample2_bilinear") {
    Shape s = rnd.shape(false);
    s.h = std::min<std::size_t>(s.h, 3);
    s.w = std::min<std::size_t>(s.w, 3);
    c.inputs = {rnd.tensor(s)};
    const Tensor<double> probe = rnd.tensor(upsample2_bilinear(c.inputs[0]).shape());
    c.f = [probe](Tape<double>&, const std::vector<Var<double>>& v) {
      return weighted_sum(upsample2_bilinear(v[0]), probe);
    };
  } else if (name == "relu") {
    c.inputs = {rnd.away_from_zero(rnd.shape(false), 0.05)};
    const Tensor<double> probe = rnd.tensor(c.inputs[0].shape());
    c.f = [probe](Tape<double>&, const std::vector<Var<double>>& v) { return weighted_sum(relu(v[0]), probe); };
  } else if (name == "add") {
    const Shape s = rnd.shape(false);
    c.inputs = {rnd.tensor(s), rnd.tensor(s)};
    const Tensor<double> probe = rnd.tensor(s);
    c.f = [probe](Tape<double>&, const std::vector<Var<double>>& v) { return weighted_sum(add(v[0], v[1]), probe); };
  } else if (name == "scale") {
    const Shape s = rnd.shape(false);
    const double factor = rnd.uniform(-2.0, 2.0);
    c.inputs = {rnd.tensor(s)};
    const Tensor<double> probe = rnd.tensor(s);
    c.f = [probe, factor](Tape<double>&, const std::vector<Var<double>>& v) {
      return weighted_sum(scale(v[0], factor), probe);
    };
  } else if (name == "concat_channels") {
    Shape s = rnd.shape(false);
    const std::size_t parts = rnd.pick(2, 3);
    for (std::size_t i = 0; i < parts; ++i) {
      s.c = rnd.pick(1, 3);
      c.inputs.push_back(rnd.tensor(s));
    }
    std::vector<const Tensor<double>*> ptrs;
    for (const auto& t : c.inputs) ptrs.push_back(&t);
    const Tensor<double> probe = rnd.tensor(concat_channels(ptrs).shape());
    c.f = [probe](Tape<double>&, const std::vector<Var<double>>& v) {
      return weighted_sum(concat_channels(v), probe);
    };
  } else if (name == "softmax_channels") {
    Shape s = rnd.shape(false);
    s.c = std::max<std::size_t>(s.c, 2);
    c.inputs = {rnd.tensor(s, -2.0, 2.0)};
    const Tensor<double> probe = rnd.tensor(s);
    c.f = [probe](Tape<double>&, const std::vector<Var<double>>& v) {
      return weighted_sum(softmax_channels(v[0]), probe);
    };
  } else if (name == "batch_norm_train" || name == "batch_norm_eval") {
    const Mode mode = name == "batch_norm_train" ? Mode::train : Mode::eval;
    Shape s = rnd.shape(false);
    if (s.n * s.plane() < 2) s.w = 2;
    const Shape channel{1, s.c, 1, 1};
    c.inputs = {rnd.tensor(s, -2.0, 2.0), rnd.tensor(channel, 0.5, 1.5), rnd.tensor(channel)};
    auto mean = std::make_shared<Tensor<double>>(rnd.tensor(channel));
    auto var = std::make_shared<Tensor<double>>(rnd.tensor(channel, 0.5, 2.0));
    const Tensor<double> probe = rnd.tensor(s);
    c.f = [probe, mean, var, mode](Tape<double>&, const std::vector<Var<double>>& v) {
      // Fresh running statistics per evaluation keep the function pure.
      auto m = std::make_shared<Tensor<double>>(*mean);
      auto r = std::make_shared<Tensor<double>>(*var);
      const Var<double> out = batch_norm(v[0], v[1], v[2], BatchNormState<double>{m.get(), r.get()}, mode);
      return weighted_sum(out, probe);
    };
  } else if (name == "sum") {
    c.inputs = {rnd.tensor(rnd.shape(false))};
    const double w = rnd.uniform(0.5, 2.0);
    c.f = [w](Tape<double>&, const std::vector<Var<double>>& v) { return scale(sum(v[0]), w); };
  } else if (name == "weighted_cross_entropy") {
    Shape s = rnd.shape(false);
    s.c = 2;
    c.inputs = {softmax_of_random(rnd, s)};
    const Tensor<double> mask = rnd.binary(Shape{s.n, 1, s.h, s.w});
    const ClassWeights weights{rnd.uniform(0.1, 1.0), rnd.uniform(0.5, 2.0)};
    c.f = [mask, weights](Tape<double>&, const std::vector<Var<double>>& v) {
      return weighted_cross_entropy(v[0], mask, weights);
    };
  } else if (name == "dps_loss") {
    const int scales = static_cast<int>(rnd.pick(2, 3));
    const std::size_t base = std::size_t{1} << scales;
    const std::size_t n = rnd.pick(1, 2);
    ScalePyramid<double> labels;
    for (int s = 0; s < scales; ++s) {
      const Shape shape{n, 2, base >> s, base >> s};
      c.inputs.push_back(softmax_of_random(rnd, shape));
      labels.levels.push_back(rnd.binary(Shape{n, 1, base >> s, base >> s}));
    }
    c.f = [labels](Tape<double>&, const std::vector<Var<double>>& v) { return dps_loss(v, labels, ClassWeights{}); };
  } else if (name == "scale_fuse") {
    const std::size_t h = rnd.pick(1, 3);
    const std::size_t w = rnd.pick(1, 3);
    const std::size_t n = rnd.pick(1, 2);
    c.inputs = {softmax_of_random(rnd, Shape{n, 2, 2 * h, 2 * w}), softmax_of_random(rnd, Shape{n, 2, h, w})};
    const Tensor<double> probe = rnd.tensor(c.inputs[0].shape());
    c.f = [probe](Tape<double>&, const std::vector<Var<double>>& v) {
      return weighted_sum(scale_fuse(v[0], v[1]), probe);
    };
  } else {
    throw UsageError("gradcheck: unknown check '" + name + "'");
  }
  return c;
}

const std::vector<std::string>& primitive_names() {
  static const std::vector<std::string> names = {
      "conv2d",           "avg_pool2",        "upsample2_bilinear", "relu",
      "add",              "scale",            "concat_channels",    "softmax_channels",
      "batch_norm_train", "batch_norm_eval",  "sum",                "weighted_cross_entropy",
      "dps_loss",         "scale_fuse"};
  return names;
}

}  // namespace

double max_gradient_error(const ScalarFunction& f, const std::vector<Tensor<double>>& inputs, std::size_t* checked,
                          double step) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  const Var<double> loss = f(tape, vars);
  tape.backward(loss);

  double worst = 0.0;
  std::size_t count = 0;
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const bool has = tape.has_grad(vars[i].id());
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double analytic = has ? tape.grad(vars[i].id())[static_cast<Eigen::Index>(j)] : 0.0;
      const double original = probe[i][j];
      probe[i][j] = original + step;
      const double plus = evaluate(f, probe);
      probe[i][j] = original - step;
      const double minus = evaluate(f, probe);
      probe[i][j] = original;
      worst = std::max(worst, relative_error(analytic, (plus - minus) / (2.0 * step)));
      ++count;
    }
  }
  if (checked != nullptr) *checked = count;
  return worst;
}

std::vector<std::string> gradcheck_names() {
  std::vector<std::string> names = primitive_names();
  names.push_back("end_to_end");
  return names;
}

GradCheckResult gradcheck_primitive(const std::string& name, int seeds, std::uint64_t base_seed) {
  GradCheckResult result;
  result.name = name;
  result.seeds = seeds;
  result.tolerance = kPrimitiveTolerance;
  for (int s = 0; s < seeds; ++s) {
    Random rnd(base_seed * 7919 + static_cast<std::uint64_t>(s) + 1);
    const CheckCase c = make_case(name, rnd);
    std::size_t checked = 0;
    result.max_rel_error = std::max(result.max_rel_error, max_gradient_error(c.f, c.inputs, &checked));
    result.checked += checked;
  }
  return result;
}

GradCheckResult gradcheck_end_to_end(int seeds, std::uint64_t base_seed, std::size_t samples_per_seed) {
  GradCheckResult result;
  result.name = "end_to_end";
  result.seeds = seeds;
  result.tolerance = kEndToEndTolerance;
  NetworkConfig config;
  config.scales = 3;
  config.base_filters = 2;

  for (int s = 0; s < seeds; ++s) {
    const std::uint64_t seed = base_seed * 7919 + static_cast<std::uint64_t>(s) + 1;
    Random rnd(seed);
    ModelParams<double> model = build<double>(config, seed);
    const Tensor<double> images = rnd.tensor(Shape{2, 1, 16, 16}, 0.0, 1.0);
    const Tensor<double> masks = rnd.binary(Shape{2, 1, 16, 16});
    // A step that flips any ReLU input sign straddles a kink, where central
    // differences do not estimate the derivative; such samples are redrawn.
    auto loss_and_pattern = [&](std::vector<bool>& pattern) {
      Tape<double> tape;
      const double loss = training_loss(tape, model, images, masks, ClassWeights{}).value()[0];
      pattern.clear();
      for (std::size_t i = 0; i < tape.size(); ++i) {
        const auto& node = tape.node(i);
        if (node.op != "relu") continue;
        const auto& in = tape.node(node.inputs.front()).value;
        for (std::size_t j = 0; j < in.size(); ++j) pattern.push_back(in[j] > 0.0);
      }
      return loss;
    };

    std::vector<bool> base_pattern, pattern;
    model.zero_grad();
    {
      Tape<double> tape;
      tape.backward(training_loss(tape, model, images, masks, ClassWeights{}));
    }
    loss_and_pattern(base_pattern);
    std::vector<std::pair<std::string, std::size_t>> coords;
    for (const auto& [name, t] : model.params) {
      for (std::size_t j = 0; j < t.size(); ++j) coords.emplace_back(name, j);
    }
    std::size_t accepted = 0;
    for (std::size_t attempt = 0; accepted < samples_per_seed && attempt < 20 * samples_per_seed && !coords.empty();
         ++attempt) {
      const auto& [name, j] = coords[rnd.pick(0, coords.size() - 1)];
      Tensor<double>& p = model.param(name);
      const double analytic = p.grad()[static_cast<Eigen::Index>(j)];
      const double original = p[j];
      p[j] = original + kFiniteDifferenceStep;
      const double plus = loss_and_pattern(pattern);
      bool smooth = pattern == base_pattern;
      p[j] = original - kFiniteDifferenceStep;
      const double minus = loss_and_pattern(pattern);
      smooth = smooth && pattern == base_pattern;
      p[j] = original;
      if (!smooth) {
        ++result.skipped;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * kFiniteDifferenceStep);
      result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic, numeric));
      ++result.checked;
      ++accepted;
    }
    if (accepted < samples_per_seed) result.max_rel_error = std::numeric_limits<double>::infinity();
  }
  return result;
}

std::vector<GradCheckResult> run_gradcheck(const std::string& only, int seeds) {
  std::vector<GradCheckResult> results;
  if (!only.empty()) {
    const auto names = gradcheck_names();
    if (std::find(names.begin(), names.end(), only) == names.end()) {
      throw UsageError("gradcheck: unknown op '" + only + "'");
    }
  }
  for (const auto& name : primitive_names()) {
    if (only.empty() || only == name) results.push_back(gradcheck_primitive(name, seeds));
  }
  if (only.empty() || only == "end_to_end") results.push_back(gradcheck_end_to_end(seeds));
  return results;
}

}  // namespace mimofan
