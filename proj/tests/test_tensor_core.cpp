#include <doctest.h>

#include <cmath>

#include "mimofan/gradcheck.hpp"
#include "mimofan/mimofan.hpp"
#include "oracles.hpp"

using namespace mimofan;

TEST_SUITE("tensor-core") {

TEST_CASE("tensor layout is NCHW row-major") {
  Tensor<float> t(Shape{2, 3, 4, 5});
  CHECK(t.size() == 120);
  t(1, 2, 3, 4) = 7.0f;
  CHECK(t[((1 * 3 + 2) * 4 + 3) * 5 + 4] == 7.0f);
  CHECK_THROWS_AS(Tensor<float>(Shape{1, 1, 2, 2}, {1.0f, 2.0f}), DimensionError);
}

TEST_CASE("conv2d: identity 1x1 kernel") {
  oracle::Rng rng(1);
  const auto x = rng.tensor(Shape{2, 1, 5, 7});
  const auto y = conv2d(x, Tensor<double>(Shape{1, 1, 1, 1}, 1.0), Tensor<double>(Shape{1, 1, 1, 1}));
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y[i] - x[i]) <= 1e-12);
}

TEST_CASE("conv2d: all-ones 3x3 with padding counts overlapping taps") {
  const Tensor<double> ones(Shape{1, 1, 3, 3}, 1.0);
  const auto y = conv2d(ones, ones, Tensor<double>(Shape{1, 1, 1, 1}), 1, 1);
  CHECK(y(0, 0, 1, 1) == 9.0);
  CHECK(y(0, 0, 0, 0) == 4.0);
  CHECK(y(0, 0, 2, 2) == 4.0);
  CHECK(y(0, 0, 0, 1) == 6.0);
}

TEST_CASE("conv2d: shape arithmetic and brute-force agreement") {
  oracle::Rng rng(2);
  const auto x = rng.tensor(Shape{2, 3, 8, 8});
  const auto k = rng.tensor(Shape{4, 3, 3, 3});
  const auto b = rng.tensor(Shape{1, 4, 1, 1});
  const auto y = conv2d(x, k, b, 1, 1);
  CHECK(y.shape() == Shape{2, 4, 8, 8});
  const auto ref = oracle::conv2d(x, k, b, 1, 1);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));

  const auto strided = conv2d(x, k, b, 2, 0);
  const auto strided_ref = oracle::conv2d(x, k, b, 2, 0);
  REQUIRE(strided.shape() == strided_ref.shape());
  for (std::size_t i = 0; i < strided.size(); ++i) CHECK(strided[i] == doctest::Approx(strided_ref[i]).epsilon(1e-12));
}

TEST_CASE("conv2d: channel mismatch names the axis") {
  const Tensor<double> x(Shape{1, 2, 4, 4});
  const Tensor<double> k(Shape{1, 3, 3, 3});
  try {
    conv2d(x, k, Tensor<double>(Shape{1, 1, 1, 1}), 1, 1);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("channel") != std::string::npos);
  }
}

TEST_CASE("avg_pool2") {
  const Tensor<double> x(Shape{1, 1, 2, 2}, {0.0, 2.0, 4.0, 6.0});
  const auto y = avg_pool2(x);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == 3.0);
  const auto big = avg_pool2(Tensor<float>(Shape{1, 1, 256, 256}, 0.25f));
  CHECK(big.shape() == Shape{1, 1, 128, 128});
  CHECK((big.data() == 0.25f).all());
  CHECK_THROWS_AS(avg_pool2(Tensor<float>(Shape{1, 1, 3, 4})), DimensionError);
}

TEST_CASE("upsample2_bilinear: half-pixel centres") {
  const auto y = upsample2_bilinear(Tensor<double>(Shape{1, 1, 1, 2}, {0.0, 1.0}));
  REQUIRE(y.shape() == Shape{1, 1, 2, 4});
  const double expected[] = {0.0, 0.25, 0.75, 1.0};
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t x = 0; x < 4; ++x) CHECK(y(0, 0, r, x) == doctest::Approx(expected[x]).epsilon(1e-15));

  const auto single = upsample2_bilinear(Tensor<double>(Shape{1, 1, 1, 1}, 0.3));
  CHECK(single.shape() == Shape{1, 1, 2, 2});
  CHECK((single.data() == 0.3).all());
  const auto flat = upsample2_bilinear(Tensor<double>(Shape{2, 3, 4, 4}, -1.5));
  CHECK(flat.shape() == Shape{2, 3, 8, 8});
  CHECK((flat.data() == -1.5).all());
}

TEST_CASE("softmax_channels") {
  const auto half = softmax_channels(Tensor<double>(Shape{1, 2, 1, 1}, {0.0, 0.0}));
  CHECK(half[0] == doctest::Approx(0.5));
  CHECK(half[1] == doctest::Approx(0.5));
  const auto p = softmax_channels(Tensor<double>(Shape{1, 2, 1, 1}, {std::log(3.0), 0.0}));
  CHECK(p[0] == doctest::Approx(0.75).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("concat_channels stacks channel counts") {
  const Tensor<float> a(Shape{1, 2, 4, 4}, 1.0f), b(Shape{1, 3, 4, 4}, 2.0f);
  const auto c = concat_channels(std::vector<const Tensor<float>*>{&a, &b});
  CHECK(c.shape() == Shape{1, 5, 4, 4});
  CHECK(c(0, 1, 3, 3) == 1.0f);
  CHECK(c(0, 2, 0, 0) == 2.0f);
  const Tensor<float> wrong(Shape{1, 1, 2, 4});
  CHECK_THROWS_AS(concat_channels(std::vector<const Tensor<float>*>{&a, &wrong}), DimensionError);
}

TEST_CASE("relu, add and scale") {
  const Tensor<double> x(Shape{1, 1, 1, 3}, {-1.0, 0.0, 2.0});
  const auto r = relu(x);
  CHECK(r[0] == 0.0);
  CHECK(r[2] == 2.0);
  CHECK(add(x, x)[2] == 4.0);
  CHECK(scale(x, 0.5)[0] == -0.5);
  CHECK_THROWS_AS(add(x, Tensor<double>(Shape{1, 1, 3, 1})), DimensionError);
}

TEST_CASE("batch_norm: train statistics, constant input, eval arithmetic") {
  oracle::Rng rng(3);
  const auto x = rng.tensor(Shape{4, 3, 5, 5}, -2.0, 5.0);
  Tensor<double> mean(Shape{1, 3, 1, 1}), var(Shape{1, 3, 1, 1}, 1.0);
  const Tensor<double> gamma(Shape{1, 3, 1, 1}, 1.0), beta(Shape{1, 3, 1, 1});
  const auto y = batch_norm(x, gamma, beta, BatchNormState<double>{&mean, &var}, Mode::train);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    const double count = 4.0 * 25.0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) m += y.plane(n, c)[i];
    m /= count;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) v += (y.plane(n, c)[i] - m) * (y.plane(n, c)[i] - m);
    v /= count;
    CHECK(std::abs(m) <= 1e-5);
    CHECK(std::abs(v - 1.0) <= 1e-3);
  }
  // running stats moved toward the batch mean with momentum 0.1
  double batch_mean = 0.0;
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t i = 0; i < 25; ++i) batch_mean += x.plane(n, 0)[i];
  batch_mean /= 100.0;
  CHECK(mean[0] == doctest::Approx(0.1 * batch_mean).epsilon(1e-12));

  Tensor<double> m2(Shape{1, 1, 1, 1}), v2(Shape{1, 1, 1, 1}, 1.0);
  const Tensor<double> g1(Shape{1, 1, 1, 1}, 1.0), b0(Shape{1, 1, 1, 1});
  const auto flat = batch_norm(Tensor<double>(Shape{2, 1, 3, 3}, 4.2), g1, b0, BatchNormState<double>{&m2, &v2},
                               Mode::train);
  CHECK((flat.data().abs() <= 1e-3).all());

  Tensor<double> rm(Shape{1, 1, 1, 1}, 2.0), rv(Shape{1, 1, 1, 1}, 4.0);
  const Tensor<double> g(Shape{1, 1, 1, 1}, 3.0), b(Shape{1, 1, 1, 1}, 0.5);
  const auto e = batch_norm(Tensor<double>(Shape{1, 1, 1, 2}, {2.0, 6.0}), g, b, BatchNormState<double>{&rm, &rv},
                            Mode::eval);
  const double inv = 1.0 / std::sqrt(4.0 + 1e-5);
  CHECK(e[0] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(e[1] == doctest::Approx((6.0 - 2.0) * inv * 3.0 + 0.5).epsilon(1e-14));
  CHECK(rm[0] == 2.0);  // eval mode leaves running statistics alone
}

TEST_CASE("backward of sum gives ones; second backward accumulates") {
  Tensor<double> x(Shape{1, 2, 3, 3}, 0.7);
  x.set_requires_grad(true);
  {
    Tape<double> tape;
    tape.backward(sum(tape.parameter(x)));
  }
  CHECK((x.grad() == 1.0).all());
  {
    Tape<double> tape;
    tape.backward(sum(tape.parameter(x)));
  }
  CHECK((x.grad() == 2.0).all());
  x.zero_grad();
  CHECK((x.grad() == 0.0).all());

  Tape<double> tape;
  auto v = tape.variable(Tensor<double>(Shape{1, 1, 2, 2}, 1.0));
  tape.backward(sum(scale(v, 3.0)));
  CHECK((tape.grad(v.id()) == 3.0).all());
}

TEST_CASE("backward rejects a non-scalar loss") {
  Tape<double> tape;
  auto v = tape.variable(Tensor<double>(Shape{1, 1, 2, 2}, 1.0));
  CHECK_THROWS_AS(tape.backward(relu(v)), ContractError);
}

TEST_CASE("verification mode flags non-finite values") {
  Tape<double> tape;
  Tensor<double> bad(Shape{1, 1, 1, 2}, {1.0, std::nan("")});
  auto v = tape.variable(bad);
  CHECK_THROWS_AS(scale(v, 2.0), NumericError);
}

TEST_CASE("every primitive passes the finite-difference check") {
  for (const auto& name : gradcheck_names()) {
    if (name == "end_to_end") continue;
    CAPTURE(name);
    const auto r = gradcheck_primitive(name, 20);
    CHECK(r.checked > 0);
    CHECK(r.max_rel_error < kPrimitiveTolerance);
  }
}

// Properties over random inputs.

TEST_CASE("property: softmax rows sum to one and stay positive") {
  oracle::Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = softmax_channels(rng.tensor(Shape{2, 3, 4, 4}, -30.0, 30.0));
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 16; ++i) {
        const double s = p.plane(n, 0)[i] + p.plane(n, 1)[i] + p.plane(n, 2)[i];
        CHECK(std::abs(s - 1.0) <= 1e-6);
        CHECK(p.plane(n, 0)[i] > 0.0);
      }
  }
}

TEST_CASE("property: pool then upsample preserves the global mean") {
  oracle::Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = rng.tensor(Shape{2, 2, 8, 12});
    CHECK(upsample2_bilinear(avg_pool2(x)).mean() == doctest::Approx(x.mean()).epsilon(1e-6));
    CHECK(avg_pool2(x).mean() == doctest::Approx(x.mean()).epsilon(1e-12));
  }
}

TEST_CASE("property: identical inputs give bitwise-identical outputs") {
  oracle::Rng rng(6);
  const auto x = rng.tensor<float>(Shape{2, 3, 8, 8});
  const auto k = rng.tensor<float>(Shape{4, 3, 3, 3});
  const auto b = rng.tensor<float>(Shape{1, 4, 1, 1});
  const auto a1 = softmax_channels(upsample2_bilinear(avg_pool2(relu(conv2d(x, k, b, 1, 1)))));
  const auto a2 = softmax_channels(upsample2_bilinear(avg_pool2(relu(conv2d(x, k, b, 1, 1)))));
  CHECK((a1.data() == a2.data()).all());
}

}  // TEST_SUITE
