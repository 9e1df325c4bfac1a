#include <doctest.h>

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/beta.hpp>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mimofan/gradcheck.hpp"
#include "mimofan/mimofan.hpp"
#include "oracles.hpp"

using namespace mimofan;

namespace {

ScalePyramid<double> one_level(Tensor<double> t, PyramidKind kind) {
  ScalePyramid<double> p;
  p.kind = kind;
  p.levels.push_back(std::move(t));
  return p;
}

struct RandomPyramids {
  ScalePyramid<double> probs, labels;
};

RandomPyramids random_pyramids(oracle::Rng& rng, std::size_t batch, std::size_t base, int scales) {
  RandomPyramids r;
  r.probs.kind = PyramidKind::probability;
  r.labels = label_pyramid(rng.mask(Shape{batch, 1, base, base}, 0.3), scales);
  for (int s = 0; s < scales; ++s) r.probs.levels.push_back(rng.probabilities(batch, base >> s, base >> s));
  return r;
}

Tensor<float> mask_from(std::initializer_list<int> bits, std::size_t h, std::size_t w) {
  Tensor<float> t(Shape{1, 1, h, w});
  std::size_t i = 0;
  for (int b : bits) t[i++] = static_cast<float>(b);
  return t;
}

double boost_two_tailed(double t, double df) {
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

}  // namespace

TEST_SUITE("loss-metrics") {

TEST_CASE("single foreground voxel at p=0.5 costs 1.2 ln 2") {
  const auto probs = one_level(Tensor<double>(Shape{1, 2, 1, 1}, {0.5, 0.5}), PyramidKind::probability);
  const auto labels = one_level(Tensor<double>(Shape{1, 1, 1, 1}, 1.0), PyramidKind::label);
  CHECK(dps_loss(probs, labels) == doctest::Approx(1.2 * std::log(2.0)).epsilon(1e-14));
  CHECK(dps_loss(probs, labels) == doctest::Approx(0.83178).epsilon(1e-5));
}

TEST_CASE("default class weights") {
  const ClassWeights w;
  CHECK(w.background == 0.2);
  CHECK(w.foreground == 1.2);
  CHECK_THROWS_AS((ClassWeights{0.0, 1.0}.validate()), ValidationError);
}

TEST_CASE("confident correct predictions cost nothing") {
  oracle::Rng rng(1);
  const auto labels = label_pyramid(rng.mask(Shape{1, 1, 16, 16}), 3);
  ScalePyramid<double> probs;
  for (const auto& l : labels.levels) {
    Tensor<double> p(Shape{1, 2, l.shape().h, l.shape().w});
    for (std::size_t i = 0; i < l.size(); ++i) {
      p.plane(0, 1)[i] = l[i];
      p.plane(0, 0)[i] = 1.0 - l[i];
    }
    probs.levels.push_back(p);
  }
  CHECK(std::abs(dps_loss(probs, labels)) <= 1e-5);
}

TEST_CASE("the loss is the mean of the per-scale losses") {
  // scale 0: four foreground voxels each costing 0.4; scale 1: one costing 0.8
  const double p0 = std::exp(-0.4 / 1.2), p1 = std::exp(-0.8 / 1.2);
  ScalePyramid<double> probs, labels;
  probs.levels.push_back(Tensor<double>(Shape{1, 2, 2, 2}, {1 - p0, 1 - p0, 1 - p0, 1 - p0, p0, p0, p0, p0}));
  probs.levels.push_back(Tensor<double>(Shape{1, 2, 1, 1}, {1 - p1, p1}));
  labels.levels.push_back(Tensor<double>(Shape{1, 1, 2, 2}, 1.0));
  labels.levels.push_back(Tensor<double>(Shape{1, 1, 1, 1}, 1.0));
  CHECK(dps_loss(probs, labels) == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("dps loss agrees with the triple-loop reference") {
  oracle::Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto r = random_pyramids(rng, 1 + trial % 3, 16, 5);
    const double w_bg = rng.uniform(0.1, 2.0), w_fg = rng.uniform(0.1, 2.0);
    const double ref = oracle::dps_loss(r.probs.levels, r.labels.levels, w_bg, w_fg);
    const double got = dps_loss(r.probs, r.labels, ClassWeights{w_bg, w_fg});
    CHECK(std::abs(got - ref) <= 1e-10 * std::abs(ref));

    Tape<double> tape;
    std::vector<Var<double>> outs;
    for (const auto& p : r.probs.levels) outs.push_back(tape.constant(p));
    const double taped = dps_loss(outs, r.labels, ClassWeights{w_bg, w_fg}).value()[0];
    CHECK(std::abs(taped - ref) <= 1e-10 * std::abs(ref));
  }
}

TEST_CASE("dps loss validates its inputs") {
  oracle::Rng rng(3);
  auto r = random_pyramids(rng, 1, 8, 3);
  auto short_labels = r.labels;
  short_labels.levels.pop_back();
  CHECK_THROWS(dps_loss(r.probs, short_labels));
  Tape<double> tape;
  const auto v = tape.constant(rng.probabilities(1, 8, 8));
  CHECK_THROWS_AS(weighted_cross_entropy(v, Tensor<double>(Shape{1, 1, 4, 4}), ClassWeights{}), DimensionError);
}

TEST_CASE("dps loss gradient matches finite differences") {
  const auto r = gradcheck_primitive("dps_loss", 20);
  CHECK(r.max_rel_error < 1e-4);
  const auto w = gradcheck_primitive("weighted_cross_entropy", 20);
  CHECK(w.max_rel_error < 1e-4);
}

TEST_CASE("property: non-negative and linear in the class weights") {
  oracle::Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const auto r = random_pyramids(rng, 2, 16, 4);
    const ClassWeights w{rng.uniform(0.1, 1.0), rng.uniform(0.1, 2.0)};
    const double k = rng.uniform(0.1, 10.0);
    const double base = dps_loss(r.probs, r.labels, w);
    CHECK(base >= 0.0);
    CHECK(dps_loss(r.probs, r.labels, ClassWeights{k * w.background, k * w.foreground}) ==
          doctest::Approx(k * base).epsilon(1e-12));
  }
}

TEST_CASE("dice on hand cases") {
  const auto a = mask_from({1, 1, 0, 0}, 2, 2);
  CHECK(dice(a, a) == 1.0);
  CHECK(dice(a, mask_from({0, 0, 1, 1}, 2, 2)) == 0.0);
  const auto p = mask_from({1, 1, 1, 1, 0, 0}, 2, 3);
  const auto t = mask_from({0, 0, 1, 1, 1, 1}, 2, 3);
  CHECK(dice(p, t) == 0.5);
  CHECK(dice(Tensor<float>(Shape{1, 1, 2, 2}), Tensor<float>(Shape{1, 1, 2, 2})) == 1.0);
}

TEST_CASE("global dice pools voxel counts") {
  const std::vector<Overlap> cases{{10, 10, 10}, {2, 4, 4}};
  CHECK(global_dice(cases) == doctest::Approx(24.0 / 28.0).epsilon(1e-15));
  EvalReport report;
  report.cases.push_back({0, "a", cases[0], cases[0].dice()});
  report.cases.push_back({0, "b", cases[1], cases[1].dice()});
  report.finalize();
  CHECK(report.average_dice == doctest::Approx(0.75));
  CHECK(report.global_dice == doctest::Approx(24.0 / 28.0));
  CHECK(global_dice(std::vector<Overlap>{{0, 0, 0}, {0, 0, 0}}) == 1.0);
  CHECK(global_dice(std::vector<Overlap>{cases[1]}) == cases[1].dice());
  CHECK_THROWS_AS(global_dice(std::vector<Overlap>{}), UsageError);
}

TEST_CASE("dice and global dice match brute-force counting") {
  oracle::Rng rng(5);
  std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs;
  oracle::Counts pooled;
  for (int trial = 0; trial < 100; ++trial) {
    const double p = rng.uniform(0.0, 0.6);
    auto pred = rng.mask<float>(Shape{1, 1, 12, 12}, p);
    auto truth = rng.mask<float>(Shape{1, 1, 12, 12}, rng.uniform(0.0, 0.6));
    const auto c = oracle::count(pred, truth);
    CHECK(dice(pred, truth) == oracle::dice(c));
    pooled.tp += c.tp;
    pooled.pred += c.pred;
    pooled.truth += c.truth;
    pairs.emplace_back(std::move(pred), std::move(truth));
  }
  CHECK(global_dice(pairs) == oracle::dice(pooled));
}

TEST_CASE("property: dice symmetry and permutation invariance") {
  oracle::Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const auto a = rng.mask<float>(Shape{1, 1, 8, 8}, 0.4);
    const auto b = rng.mask<float>(Shape{1, 1, 8, 8}, 0.4);
    CHECK(dice(a, b) == dice(b, a));
    std::vector<std::size_t> perm(64);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.gen);
    Tensor<float> pa(a.shape()), pb(b.shape());
    for (std::size_t i = 0; i < 64; ++i) {
      pa[i] = a[perm[i]];
      pb[i] = b[perm[i]];
    }
    CHECK(dice(pa, pb) == dice(a, b));
  }
}

TEST_CASE("property: average and global dice agree for equal |P|+|T|") {
  oracle::Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    EvalReport r;
    for (int c = 0; c < 5; ++c) {
      const std::size_t pred = static_cast<std::size_t>(rng.uniform(1, 20));
      const std::size_t truth = 20 - pred;
      const std::size_t inter = static_cast<std::size_t>(rng.uniform(0, static_cast<double>(std::min(pred, truth))));
      const Overlap o{inter, pred, truth};
      r.cases.push_back({0, std::to_string(c), o, o.dice()});
    }
    r.finalize();
    CHECK(r.average_dice == doctest::Approx(r.global_dice).epsilon(1e-12));
  }
}

TEST_CASE("eval CSV layout") {
  EvalReport r;
  r.fold_id = 2;
  r.cases.push_back({2, "case001", Overlap{1, 2, 2}, 0.5});
  r.finalize();
  std::ostringstream out;
  write_eval_csv(out, r);
  CHECK(out.str().rfind("fold,case_id,dice\n2,case001,0.5\n", 0) == 0);
  CHECK(out.str().find("summary,0.5,0.5") != std::string::npos);
}

TEST_CASE("paired t-test against an independent Student-t implementation") {
  const std::vector<double> base{0.3, 0.9, 0.1, 0.4, 0.7};
  std::vector<double> shifted = base;
  const double d[] = {1, 0, 1, 0, 1};
  for (std::size_t i = 0; i < 5; ++i) shifted[i] += d[i];
  const auto r = paired_t_test(shifted, base);
  CHECK(r.t == doctest::Approx(2.449).epsilon(1e-3));
  CHECK(r.df == 4.0);
  CHECK(std::abs(r.p - 0.0705) <= 1e-3);
  CHECK(r.p == doctest::Approx(boost_two_tailed(r.t, r.df)).epsilon(1e-10));
  CHECK(r.p_one_sided == doctest::Approx(r.p / 2.0).epsilon(1e-12));

  const auto swapped = paired_t_test(base, shifted);
  CHECK(swapped.t == doctest::Approx(-r.t).epsilon(1e-14));
  CHECK(swapped.p == doctest::Approx(r.p).epsilon(1e-14));
}

TEST_CASE("paired t-test reproduces known one-tailed ablation p-values") {
  // Five-fold Dice (%) of the full model and three baselines.
  const std::vector<double> full{96.2, 95.6, 94.6, 95.7, 96.2};
  const std::vector<double> unet{94.5, 93.8, 94.1, 93.0, 94.1};
  const std::vector<double> resunet{94.5, 94.1, 94.9, 92.4, 94.5};
  const std::vector<double> denseunet{94.1, 94.2, 93.9, 93.6, 94.5};
  CHECK(std::abs(paired_t_test(full, unet).p_one_sided - 0.004) <= 5e-4);
  CHECK(std::abs(paired_t_test(full, resunet).p_one_sided - 0.025) <= 5e-4);
  CHECK(std::abs(paired_t_test(full, denseunet).p_one_sided - 0.002) <= 5e-4);
  // reported spreads are population standard deviations
  CHECK(mean_std(unet).std == doctest::Approx(0.50).epsilon(0.01));
  CHECK(mean_std(resunet).std == doctest::Approx(0.88).epsilon(0.01));
  CHECK(mean_std(full).std == doctest::Approx(0.59).epsilon(0.01));
  CHECK(mean_std(full).mean == doctest::Approx(95.66));
}

TEST_CASE("paired t-test edge cases") {
  const std::vector<double> a{1.0, 2.0, 3.0};
  const std::vector<double> shifted{2.0, 3.0, 4.0};
  CHECK_THROWS_AS(paired_t_test(a, a), DegenerateSampleError);
  CHECK_THROWS_AS(paired_t_test(a, shifted), DegenerateSampleError);
  CHECK_THROWS_AS(paired_t_test(a, std::vector<double>{1.0, 2.0}), UsageError);
  CHECK_THROWS_AS(paired_t_test(std::vector<double>{1.0}, std::vector<double>{2.0}), UsageError);
}

TEST_CASE("property: t statistic is invariant to a common shift") {
  oracle::Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> a(6), b(6);
    for (std::size_t i = 0; i < 6; ++i) {
      a[i] = rng.uniform(0.8, 1.0);
      b[i] = rng.uniform(0.8, 1.0);
    }
    const double c = rng.uniform(-5.0, 5.0);
    std::vector<double> ac = a, bc = b;
    for (std::size_t i = 0; i < 6; ++i) {
      ac[i] += c;
      bc[i] += c;
    }
    const auto r1 = paired_t_test(a, b), r2 = paired_t_test(ac, bc);
    CHECK(r2.t == doctest::Approx(r1.t).epsilon(1e-8));
    CHECK(r1.p == doctest::Approx(boost_two_tailed(r1.t, r1.df)).epsilon(1e-9));
  }
}

TEST_CASE("regularized incomplete beta matches Boost") {
  oracle::Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const double a = rng.uniform(0.1, 20.0), b = rng.uniform(0.1, 20.0), x = rng.uniform(0.0, 1.0);
    CHECK(regularized_incomplete_beta(a, b, x) == doctest::Approx(boost::math::ibeta(a, b, x)).epsilon(1e-10));
  }
  CHECK(regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0);
  CHECK(regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0);
}

}  // TEST_SUITE
