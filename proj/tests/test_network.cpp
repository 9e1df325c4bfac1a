#include <doctest.h>

#include <cmath>
#include <functional>

#include "mimofan/mimofan.hpp"
#include "oracles.hpp"

using namespace mimofan;

namespace {

NetworkConfig tiny(int filters = 2, int scales = 5, bool dcc = true) {
  NetworkConfig c;
  c.base_filters = filters;
  c.scales = scales;
  c.toggles.dcc = dcc;
  return c;
}

std::vector<Var<double>> pyramid_leaves(Tape<double>& tape, const Tensor<double>& image, int scales) {
  std::vector<Var<double>> leaves;
  for (const auto& level : image_pyramid(image, scales).levels) leaves.push_back(tape.constant(level));
  return leaves;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  return (a.data() - b.data()).abs().maxCoeff();
}

}  // namespace

TEST_SUITE("network") {

TEST_CASE("config parsing and validation") {
  CHECK(parse_arch("unet") == Arch::unet);
  CHECK_THROWS_AS(parse_arch("densenet"), UsageError);
  NetworkConfig c = tiny(8, 4, false);
  c.toggles.sf = false;
  CHECK(NetworkConfig::parse(c.canonical()) == c);
  NetworkConfig bad;
  bad.scales = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(NetworkConfig::parse("arch=mimofan\nwidth=3\n"), ConfigError);
  CHECK(NetworkConfig{}.channels(0) == 16);
  CHECK(NetworkConfig{}.channels(6) == 256);
}

TEST_CASE("build is deterministic in (config, seed)") {
  const auto a = build<float>(tiny(4), 7);
  const auto b = build<float>(tiny(4), 7);
  const auto c = build<float>(tiny(4), 8);
  REQUIRE(a.params.size() == b.params.size());
  bool any_diff = false;
  for (const auto& [name, t] : a.params) {
    CHECK((t.data() == b.params.at(name).data()).all());
    any_diff = any_diff || !(t.data() == c.params.at(name).data()).all();
  }
  CHECK(any_diff);
}

TEST_CASE("parameter counts match the layer-sum formula") {
  CHECK(build<float>(tiny(8), 0).parameter_count() == oracle::mimofan_params(8, 5, true));
  CHECK(build<float>(tiny(8, 5, false), 0).parameter_count() == oracle::mimofan_params(8, 5, false));
  CHECK(build<float>(tiny(3, 3), 0).parameter_count() == oracle::mimofan_params(3, 3, true));
  NetworkConfig u = tiny(8);
  u.arch = Arch::unet;
  NetworkConfig r = u;
  r.arch = Arch::resunet;
  const auto nu = build<float>(u, 0).parameter_count();
  const auto nr = build<float>(r, 0).parameter_count();
  CHECK(nu == oracle::baseline_params(8, 5, false));
  CHECK(nr == oracle::baseline_params(8, 5, true));
  CHECK(nr >= nu);
  // Toggling dense links only ever removes first-conv input channels.
  CHECK(oracle::mimofan_params(8, 5, false) < oracle::mimofan_params(8, 5, true));
}

TEST_CASE("mimofan forward: five normalised maps at dyadic sizes") {
  auto model = build<double>(tiny(2), 1);
  oracle::Rng rng(2);
  const auto image = rng.tensor(Shape{1, 1, 32, 32}, 0.0, 1.0);
  const auto out = forward_mimofan(model, image_pyramid(image, 5), Mode::train);
  REQUIRE(out.size() == 5);
  for (std::size_t s = 0; s < 5; ++s) {
    CHECK(out[s].shape() == Shape{1, 2, 32u >> s, 32u >> s});
    for (std::size_t i = 0; i < out[s].shape().plane(); ++i) {
      CHECK(std::abs(out[s].plane(0, 0)[i] + out[s].plane(0, 1)[i] - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("mimofan forward rejects a mismatched pyramid") {
  auto model = build<double>(tiny(2, 3), 1);
  Tape<double> tape;
  auto leaves = pyramid_leaves(tape, Tensor<double>(Shape{1, 1, 16, 16}), 2);
  CHECK_THROWS_AS(forward_mimofan(tape, model, leaves), ConfigError);
}

TEST_CASE("depth-0 block is shared: scale-1 feature equals the block applied to the pooled image") {
  const int F = 3;
  auto model = build<double>(tiny(F, 3), 5);
  oracle::Rng rng(6);
  for (auto& [name, t] : model.buffers) {
    // non-trivial running statistics so that eval-mode normalisation matters
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = name.ends_with("running_var") ? rng.uniform(0.5, 2.0) : rng.uniform(-0.2, 0.2);
  }
  const auto image = rng.tensor(Shape{1, 1, 16, 16}, 0.0, 1.0);

  Tape<double> tape;
  ForwardOptions eval;
  eval.mode = Mode::eval;
  forward_mimofan(tape, model, pyramid_leaves(tape, image, 3), eval);
  // The second relu with (1, F, 8, 8) output in recording order closes the
  // shared block at scale 1 (the first is its inner activation).
  std::vector<std::size_t> hits;
  for (std::size_t i = 0; i < tape.size(); ++i) {
    if (tape.node(i).op == "relu" && tape.value(i).shape() == Shape{1, F, 8, 8}) hits.push_back(i);
  }
  REQUIRE(hits.size() >= 2);
  const Tensor<double>& inside = tape.value(hits[1]);

  auto P = [&](const std::string& n) -> Tensor<double>& { return model.param("enc.d0.shared." + n); };
  auto bn = [&](const Tensor<double>& x, const std::string& n) {
    Tensor<double> y(x.shape());
    const auto& m = model.buffer("enc.d0.shared." + n + ".running_mean");
    const auto& v = model.buffer("enc.d0.shared." + n + ".running_var");
    for (std::size_t c = 0; c < x.shape().c; ++c)
      for (std::size_t i = 0; i < x.shape().plane(); ++i)
        y.plane(0, c)[i] = (x.plane(0, c)[i] - m[c]) / std::sqrt(v[c] + 1e-5) * P(n + ".gamma")[c] + P(n + ".beta")[c];
    return y;
  };
  const auto pooled = avg_pool2(image);
  auto h = relu(bn(oracle::conv2d(pooled, P("conv1.weight"), P("conv1.bias"), 1, 1), "bn1"));
  h = bn(oracle::conv2d(h, P("conv2.weight"), P("conv2.bias"), 1, 1), "bn2");
  const auto skip = oracle::conv2d(pooled, P("proj.weight"), P("proj.bias"), 1, 0);
  const auto expected = relu(add(h, skip));
  CHECK(max_abs_diff(inside, expected) <= 1e-12);

  for (const auto& [name, t] : model.params)
    if (name.starts_with("enc.d0.")) CHECK(name.starts_with("enc.d0.shared."));
}

TEST_CASE("every input-to-output path is 19 convolutions deep") {
  for (Arch arch : {Arch::mimofan, Arch::unet, Arch::resunet}) {
    CAPTURE(to_string(arch));
    NetworkConfig config = tiny(2);
    config.arch = arch;
    auto model = build<double>(config, 3);
    Tape<double> tape;
    const Tensor<double> image(Shape{1, 1, 32, 32}, 0.5);
    std::vector<std::size_t> sources, sinks;
    if (arch == Arch::mimofan) {
      const auto leaves = pyramid_leaves(tape, image, 5);
      for (const auto& l : leaves) sources.push_back(l.id());
      for (const auto& o : forward_mimofan(tape, model, leaves)) sinks.push_back(o.id());
    } else {
      const auto leaf = tape.constant(image);
      sources.push_back(leaf.id());
      sinks.push_back(forward_baseline(tape, model, leaf, arch).id());
    }
    for (std::size_t src : sources)
      for (std::size_t dst : sinks) {
        const oracle::PathCount p = oracle::count_convs(tape, src, dst);
        CHECK(p.longest == 19);
        const ConvDepth lib = conv_depth(tape, src, dst);
        CHECK(lib.longest == p.longest);
        CHECK(lib.shortest == p.shortest);
      }
  }
}

TEST_CASE("disabling dense links equals zeroing the cross-scale inputs") {
  const auto dense = build<double>(tiny(2, 4, true), 9);
  auto sparse = build<double>(tiny(2, 4, false), 9);
  auto dense_copy = dense;
  // Carry every own-path weight over; first convolutions keep only their
  // leading own-input channels.
  for (auto& [name, t] : sparse.params) {
    const auto& src = dense.params.at(name);
    if (src.shape() == t.shape()) {
      t = src;
      continue;
    }
    const Shape s = t.shape();
    for (std::size_t o = 0; o < s.n; ++o)
      for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t y = 0; y < s.h; ++y)
          for (std::size_t x = 0; x < s.w; ++x) t(o, c, y, x) = src(o, c, y, x);
  }
  oracle::Rng rng(10);
  const auto image = rng.tensor(Shape{2, 1, 16, 16}, 0.0, 1.0);
  Tape<double> t1, t2;
  ForwardOptions zeroed;
  zeroed.zero_cross_scale = true;
  const auto a = forward_mimofan(t1, dense_copy, pyramid_leaves(t1, image, 4), zeroed);
  const auto b = forward_mimofan(t2, sparse, pyramid_leaves(t2, image, 4));
  for (std::size_t s = 0; s < 4; ++s) CHECK(max_abs_diff(a[s].value(), b[s].value()) <= 1e-12);

  Tape<double> t3;
  CHECK_THROWS_AS(forward_mimofan(t3, sparse, pyramid_leaves(t3, image, 4), zeroed), ContractError);
}

TEST_CASE("gradient sparsity follows the wiring") {
  auto model = build<double>(tiny(2, 5), 4);
  oracle::Rng rng(12);
  const auto image = rng.tensor(Shape{2, 1, 32, 32}, 0.0, 1.0);
  auto grads_from_head = [&](std::size_t head) {
    model.zero_grad();
    Tape<double> tape;
    const auto outs = forward_mimofan(tape, model, pyramid_leaves(tape, image, 5));
    const auto coeff = rng.tensor(outs[head].shape());
    tape.backward(weighted_sum(outs[head], coeff));
  };
  auto touched = [&](const std::string& name) { return (model.param(name).grad() != 0.0).any(); };

  grads_from_head(4);
  CHECK(touched("enc.d0.shared.conv1.weight"));
  CHECK(touched("head.s4.weight"));
  for (int s = 0; s < 4; ++s) {
    CHECK_FALSE(touched("head.s" + std::to_string(s) + ".weight"));
    CHECK_FALSE(touched("dec.d0.s" + std::to_string(s) + ".conv1.weight"));
  }

  grads_from_head(0);
  CHECK(touched("enc.d0.shared.conv1.weight"));
  CHECK(touched("enc.d4.s4.conv1.weight"));
  CHECK(touched("dec.d0.s0.conv2.weight"));
  for (int s = 1; s < 5; ++s) {
    CHECK_FALSE(touched("head.s" + std::to_string(s) + ".weight"));
    CHECK_FALSE(touched("dec.d0.s" + std::to_string(s) + ".conv1.weight"));
  }
}

TEST_CASE("baselines: full-resolution two-class output") {
  for (Arch arch : {Arch::unet, Arch::resunet}) {
    NetworkConfig c = tiny(2);
    c.arch = arch;
    auto model = build<float>(c, 2);
    oracle::Rng rng(3);
    const auto p = forward_baseline(model, rng.tensor<float>(Shape{1, 1, 64, 64}, 0.0, 1.0), arch);
    CHECK(p.shape() == Shape{1, 2, 64, 64});
    for (std::size_t i = 0; i < p.shape().plane(); ++i) CHECK(std::abs(p.plane(0, 0)[i] + p.plane(0, 1)[i] - 1.0f) <= 1e-6f);

    model.param("head.weight").data().setZero();
    model.param("head.bias").data().setZero();
    const auto flat = forward_baseline(model, Tensor<float>(Shape{1, 1, 64, 64}), arch);
    CHECK((flat.data() == 0.5f).all());
  }
  NetworkConfig u = tiny(2);
  u.arch = Arch::unet;
  auto model = build<float>(u, 2);
  CHECK_THROWS_AS(forward_baseline(model, Tensor<float>(Shape{1, 1, 64, 64}), Arch::resunet), ConfigError);
}

TEST_CASE("scale_fuse") {
  oracle::Rng rng(14);
  const auto p1 = rng.probabilities(1, 4, 4);
  const auto p0 = upsample2_bilinear(p1);
  CHECK(max_abs_diff(scale_fuse(p0, p1), p0) <= 1e-15);

  Tensor<double> a(Shape{1, 2, 2, 2}), b(Shape{1, 2, 1, 1}, {0.2, 0.8});
  for (std::size_t i = 0; i < 4; ++i) {
    a.plane(0, 0)[i] = 0.4;
    a.plane(0, 1)[i] = 0.6;
  }
  const auto f = scale_fuse(a, b);
  for (std::size_t i = 0; i < 4; ++i) CHECK(f.plane(0, 1)[i] == doctest::Approx(0.7).epsilon(1e-15));

  for (int trial = 0; trial < 10; ++trial) {
    const auto fused = scale_fuse(rng.probabilities(2, 8, 8), rng.probabilities(2, 4, 4));
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 64; ++i) CHECK(std::abs(fused.plane(n, 0)[i] + fused.plane(n, 1)[i] - 1.0) <= 1e-6);
  }
  CHECK_THROWS_AS(scale_fuse(rng.probabilities(1, 8, 8), rng.probabilities(1, 8, 8)), DimensionError);
}

TEST_CASE("predict_mask thresholds the foreground channel") {
  const Tensor<double> p(Shape{1, 2, 1, 3}, {0.3, 0.5, 1.0, 0.7, 0.5, 0.0});
  const auto m = predict_mask(p);
  CHECK(m.shape() == Shape{1, 1, 1, 3});
  CHECK(m[0] == 1.0);
  CHECK(m[1] == 0.0);
  CHECK(m[2] == 0.0);
}

TEST_CASE("predict_probability honours the scale-fusing toggle") {
  NetworkConfig c = tiny(2, 3);
  auto fused = build<double>(c, 1);
  c.toggles.sf = false;
  auto plain = build<double>(c, 1);
  oracle::Rng rng(15);
  const auto image = rng.tensor(Shape{1, 1, 16, 16}, 0.0, 1.0);
  const auto outs = forward_mimofan(plain, image_pyramid(image, 3));
  CHECK(max_abs_diff(predict_probability(plain, image), outs[0]) == 0.0);
  CHECK(max_abs_diff(predict_probability(fused, image), scale_fuse(outs[0], outs[1])) <= 1e-15);
}

}  // TEST_SUITE
