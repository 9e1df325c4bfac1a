#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mimofan/autograd.hpp"

namespace mimofan {

/// Central finite-difference verification of reverse-mode gradients (64-bit only).
struct GradCheckResult {
  std::string name;
  int seeds = 0;
  std::size_t checked = 0;      ///< number of scalar derivatives compared
  std::size_t skipped = 0;      ///< samples redrawn because the step crossed a ReLU kink
  double max_rel_error = 0.0;   ///< max |analytic - numeric| / (|numeric| + 1e-8)
  double tolerance = 0.0;
  bool passed() const { return max_rel_error < tolerance; }
};

inline constexpr double kFiniteDifferenceStep = 1e-4;
inline constexpr double kPrimitiveTolerance = 1e-4;
inline constexpr double kEndToEndTolerance = 1e-3;

/// Builds a scalar loss on `tape` from leaves created for `inputs` (one Var per input, same order).
using ScalarFunction = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Compares tape gradients against central differences for every element of every input.
/// Returns the worst relative error.
double max_gradient_error(const ScalarFunction& f, const std::vector<Tensor<double>>& inputs,
                          std::size_t* checked = nullptr, double step = kFiniteDifferenceStep);

/// Names accepted by gradcheck_primitive, plus "end_to_end".
std::vector<std::string> gradcheck_names();

/// Randomised check of one primitive over `seeds` seeds with shapes up to 4x4x6x6.
GradCheckResult gradcheck_primitive(const std::string& name, int seeds = 20, std::uint64_t base_seed = 0);

/// DPS loss of a tiny multi-scale network (S=3, F=2, 16x16, batch 2) w.r.t. sampled parameters.
GradCheckResult gradcheck_end_to_end(int seeds = 20, std::uint64_t base_seed = 0, std::size_t samples_per_seed = 48);

/// Runs every check, or only `only` when non-empty. Throws UsageError for an unknown name.
std::vector<GradCheckResult> run_gradcheck(const std::string& only = "", int seeds = 20);

}  // namespace mimofan
