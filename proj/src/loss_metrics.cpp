#include "mimofan/loss_metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>

namespace mimofan {

void ClassWeights::validate() const {
  if (!(background > 0.0) || !(foreground > 0.0)) {
    throw ValidationError("class weights must be positive");
  }
}

template <typename Scalar>
Var<Scalar> weighted_cross_entropy(const Var<Scalar>& prob, const Tensor<Scalar>& mask, const ClassWeights& weights) {
  weights.validate();
  const Shape& s = prob.shape();
  require_dim("weighted_cross_entropy", "channel", s.c, 2);
  require_dim("weighted_cross_entropy", "batch", mask.shape().n, s.n);
  require_dim("weighted_cross_entropy", "mask-channel", mask.shape().c, 1);
  require_dim("weighted_cross_entropy", "height", mask.shape().h, s.h);
  require_dim("weighted_cross_entropy", "width", mask.shape().w, s.w);
  require_binary("weighted_cross_entropy", mask);

  const Scalar floor(kProbabilityFloor);
  const Scalar w_bg(weights.background);
  const Scalar w_fg(weights.foreground);
  const std::size_t plane = s.plane();
  const auto voxels = static_cast<Scalar>(s.n * plane);
  const Tensor<Scalar>& p = prob.value();

  Scalar total(0);
  for (std::size_t n = 0; n < s.n; ++n) {
    const Scalar* bg = p.plane(n, 0);
    const Scalar* fg = p.plane(n, 1);
    const Scalar* y = mask.plane(n, 0);
    Scalar row(0);
    for (std::size_t i = 0; i < plane; ++i) {
      row += y[i] != Scalar(0) ? w_fg * std::log(std::max(fg[i], floor)) : w_bg * std::log(std::max(bg[i], floor));
    }
    total -= row;
  }
  Tensor<Scalar> out(Shape{}, total / voxels);

  const std::size_t x = prob.id();
  return prob.tape()->record(
      "weighted_cross_entropy", std::move(out), {x},
      [x, mask, floor, w_bg, w_fg, voxels](Tape<Scalar>& t, std::size_t self) {
        const Tensor<Scalar>& p = t.value(x);
        const Shape& s = p.shape();
        const std::size_t plane = s.plane();
        const Scalar upstream = t.grad(self)[0];
        auto& g = t.grad_accumulator(x);
        for (std::size_t n = 0; n < s.n; ++n) {
          const Scalar* y = mask.plane(n, 0);
          for (std::size_t i = 0; i < plane; ++i) {
            const bool foreground = y[i] != Scalar(0);
            const std::size_t at = p.offset(n, foreground ? 1 : 0, 0, 0) + i;
            const Scalar v = p[at];
            // Below the floor the clamp is constant, so no gradient flows.
            if (v > floor) g[static_cast<Eigen::Index>(at)] -= upstream * (foreground ? w_fg : w_bg) / (v * voxels);
          }
        }
      });
}

namespace {

void check_pyramids(std::size_t outputs, std::size_t labels) {
  if (outputs == 0) throw DimensionError("dps_loss: empty output pyramid");
  if (outputs != labels) {
    throw DimensionError("dps_loss: output pyramid has " + std::to_string(outputs) + " scales, labels have " +
                         std::to_string(labels));
  }
}

}  // namespace

template <typename Scalar>
Var<Scalar> dps_loss(const std::vector<Var<Scalar>>& outputs, const ScalePyramid<Scalar>& labels,
                     const ClassWeights& weights) {
  check_pyramids(outputs.size(), labels.size());
  Var<Scalar> total = weighted_cross_entropy(outputs[0], labels[0], weights);
  for (std::size_t s = 1; s < outputs.size(); ++s) {
    total = add(total, weighted_cross_entropy(outputs[s], labels[s], weights));
  }
  return scale(total, Scalar(1) / static_cast<Scalar>(outputs.size()));
}

template <typename Scalar>
Scalar dps_loss(const ScalePyramid<Scalar>& outputs, const ScalePyramid<Scalar>& labels, const ClassWeights& weights) {
  check_pyramids(outputs.size(), labels.size());
  Tape<Scalar> tape;
  std::vector<Var<Scalar>> vars;
  for (const auto& level : outputs.levels) vars.push_back(tape.constant(level));
  return dps_loss(vars, labels, weights).value()[0];
}

Overlap& Overlap::operator+=(const Overlap& other) {
  intersection += other.intersection;
  predicted += other.predicted;
  truth += other.truth;
  return *this;
}

double Overlap::dice() const {
  const std::size_t denom = predicted + truth;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(intersection) / static_cast<double>(denom);
}

template <typename Scalar>
Overlap overlap(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth) {
  require_same_shape("dice", pred.shape(), truth.shape());
  require_binary("dice", pred);
  require_binary("dice", truth);
  Overlap counts;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != Scalar(0);
    const bool t = truth[i] != Scalar(0);
    counts.predicted += p;
    counts.truth += t;
    counts.intersection += p && t;
  }
  return counts;
}

double global_dice(std::span<const Overlap> cases) {
  if (cases.empty()) throw UsageError("global_dice: no cases");
  Overlap pooled;
  for (const auto& c : cases) pooled += c;
  return pooled.dice();
}

template <typename Scalar>
double global_dice(const std::vector<std::pair<Tensor<Scalar>, Tensor<Scalar>>>& cases) {
  std::vector<Overlap> counts;
  counts.reserve(cases.size());
  for (const auto& [pred, truth] : cases) counts.push_back(overlap(pred, truth));
  return global_dice(counts);
}

std::vector<double> EvalReport::per_case_dice() const {
  std::vector<double> out;
  out.reserve(cases.size());
  for (const auto& c : cases) out.push_back(c.dice);
  return out;
}

void EvalReport::finalize() {
  if (cases.empty()) {
    average_dice = global_dice = 0.0;
    return;
  }
  std::vector<Overlap> counts;
  double total = 0.0;
  for (const auto& c : cases) {
    total += c.dice;
    counts.push_back(c.counts);
  }
  average_dice = total / static_cast<double>(cases.size());
  global_dice = mimofan::global_dice(counts);
}

void write_eval_csv(std::ostream& out, const EvalReport& report) {
  out << "fold,case_id,dice\n" << std::setprecision(10);
  for (const auto& c : report.cases) out << c.fold << ',' << c.case_id << ',' << c.dice << '\n';
  out << "summary," << report.average_dice << ',' << report.global_dice << '\n';
}

void write_eval_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write evaluation report: " + path);
  write_eval_csv(out, report);
  if (!out) throw IoError("failed while writing evaluation report: " + path);
}

double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw ContractError("incomplete beta: shape parameters must be positive");
  if (x < 0.0 || x > 1.0) throw ContractError("incomplete beta: x must lie in [0, 1]");
  if (x == 0.0 || x == 1.0) return x;

  // Continued fraction (modified Lentz), evaluated on the side where it converges fast.
  const auto continued_fraction = [](double a, double b, double x) {
    constexpr double tiny = 1e-300;
    constexpr double eps = 1e-15;
    double c = 1.0;
    double d = 1.0 - (a + b) * x / (a + 1.0);
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 10000; ++m) {
      const double m2 = 2.0 * m;
      double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
      d = 1.0 + num * d;
      if (std::abs(d) < tiny) d = tiny;
      c = 1.0 + num / c;
      if (std::abs(c) < tiny) c = tiny;
      d = 1.0 / d;
      h *= d * c;
      num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
      d = 1.0 + num * d;
      if (std::abs(d) < tiny) d = tiny;
      c = 1.0 + num / c;
      if (std::abs(c) < tiny) c = tiny;
      d = 1.0 / d;
      const double delta = d * c;
      h *= delta;
      if (std::abs(delta - 1.0) < eps) return h;
    }
    throw NumericError("incomplete beta: continued fraction did not converge");
  };
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * continued_fraction(a, b, x) / a;
  return 1.0 - std::exp(log_front) * continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_tailed(double t, double df) {
  if (!(df > 0.0)) throw ContractError("student t: degrees of freedom must be positive");
  if (std::isinf(t)) return 0.0;
  return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw UsageError("paired_t_test: samples differ in length");
  if (a.size() < 2) throw UsageError("paired_t_test: need at least two pairs");
  const auto n = static_cast<double>(a.size());
  std::vector<double> diff(a.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff[i] = a[i] - b[i];
    mean += diff[i];
  }
  mean /= n;
  double ss = 0.0;
  for (double d : diff) ss += (d - mean) * (d - mean);
  const double var = ss / (n - 1.0);
  if (!(var > 0.0)) throw DegenerateSampleError("paired_t_test: differences have zero variance");

  TTestResult result;
  result.df = n - 1.0;
  result.t = mean / std::sqrt(var / n);
  result.p = student_t_two_tailed(result.t, result.df);
  result.p_one_sided = result.p / 2.0;
  return result;
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw UsageError("mean_std: no values");
  MeanStd out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(values.size()));
  return out;
}

#define MIMOFAN_INSTANTIATE_LOSS(S)                                                                          \
  template Var<S> weighted_cross_entropy(const Var<S>&, const Tensor<S>&, const ClassWeights&);             \
  template Var<S> dps_loss(const std::vector<Var<S>>&, const ScalePyramid<S>&, const ClassWeights&);        \
  template S dps_loss(const ScalePyramid<S>&, const ScalePyramid<S>&, const ClassWeights&);                 \
  template Overlap overlap(const Tensor<S>&, const Tensor<S>&);                                             \
  template double global_dice(const std::vector<std::pair<Tensor<S>, Tensor<S>>>&);

MIMOFAN_INSTANTIATE_LOSS(float)
MIMOFAN_INSTANTIATE_LOSS(double)

#undef MIMOFAN_INSTANTIATE_LOSS

}  // namespace mimofan
