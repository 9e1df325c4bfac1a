#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mimofan/autograd.hpp"
#include "mimofan/pyramid.hpp"

namespace mimofan {

/// Per-class cross-entropy weights.
struct ClassWeights {
  double background = 0.2;
  double foreground = 1.2;

  /// Throws ValidationError unless both weights are positive.
  void validate() const;
};

/// Probabilities are clamped from below to this value before taking the log.
inline constexpr double kProbabilityFloor = 1e-7;

/// Weighted cross-entropy of one scale, averaged over the N = n*h*w voxels:
///   (1/N) sum_i sum_c -w_c y_c log max(p_c, floor)
/// `prob` is (n, 2, h, w); `mask` is a binary (n, 1, h, w) foreground mask.
template <typename Scalar>
Var<Scalar> weighted_cross_entropy(const Var<Scalar>& prob, const Tensor<Scalar>& mask, const ClassWeights& weights);

/// Deep pyramid supervision loss: the mean over scales of the per-scale
/// weighted cross-entropy. Differentiable w.r.t. `outputs`.
template <typename Scalar>
Var<Scalar> dps_loss(const std::vector<Var<Scalar>>& outputs, const ScalePyramid<Scalar>& labels,
                     const ClassWeights& weights = {});

template <typename Scalar>
Scalar dps_loss(const ScalePyramid<Scalar>& outputs, const ScalePyramid<Scalar>& labels,
                const ClassWeights& weights = {});

/// Voxel counts behind a Dice score.
struct Overlap {
  std::size_t intersection = 0;
  std::size_t predicted = 0;
  std::size_t truth = 0;

  Overlap& operator+=(const Overlap& other);
  /// 2|P n T| / (|P| + |T|); 1 when both masks are empty.
  double dice() const;
};

template <typename Scalar>
Overlap overlap(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth);

template <typename Scalar>
double dice(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth) {
  return overlap(pred, truth).dice();
}

/// Dice on voxel counts pooled over all cases. Throws UsageError on an empty list.
double global_dice(std::span<const Overlap> cases);

template <typename Scalar>
double global_dice(const std::vector<std::pair<Tensor<Scalar>, Tensor<Scalar>>>& cases);

struct CaseResult {
  int fold = 0;
  std::string case_id;
  Overlap counts;
  double dice = 0.0;
};

struct EvalReport {
  int fold_id = 0;
  std::vector<CaseResult> cases;
  double average_dice = 0.0;
  double global_dice = 0.0;

  std::vector<double> per_case_dice() const;
  /// Recomputes average_dice and global_dice from the case list.
  void finalize();
};

/// `fold,case_id,dice` rows followed by `summary,<average_dice>,<global_dice>`.
void write_eval_csv(std::ostream& out, const EvalReport& report);
void write_eval_csv(const std::string& path, const EvalReport& report);

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 0.0;            ///< two-tailed
  double p_one_sided = 0.0;  ///< one-tailed, in the direction of the observed mean difference
};

/// Paired Student t-test on a - b. Throws UsageError on length mismatch or
/// n < 2 and DegenerateSampleError when all differences are equal.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

/// Regularized incomplete beta function I_x(a, b).
double regularized_incomplete_beta(double a, double b, double x);

/// Two-tailed tail probability P(|T| >= |t|) of Student's t with `df` degrees of freedom.
double student_t_two_tailed(double t, double df);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  ///< population standard deviation
};

MeanStd mean_std(std::span<const double> values);

}  // namespace mimofan
