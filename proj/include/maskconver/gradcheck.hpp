#pragma once

#include <functional>
#include <string>
#include <vector>

#include "maskconver/autodiff.hpp"
#include "maskconver/tensor.hpp"

namespace maskconver {

// Builds a scalar loss from leaf values corresponding to the checked inputs.
// Must be a deterministic pure function of those inputs.
using GradCheckFn = std::function<Value(GradTape&, const std::vector<Value>&)>;

// Compares tape gradients against central finite differences (default step
// 1e-5). Returns max |analytic - fd| / max(|analytic|_inf, |fd|_inf, 1e-6)
// over every element of every input.
double gradient_check(const GradCheckFn& fn, const std::vector<Tensor>& inputs, double step = 1e-5);

// Convenience: loss = sum(output * weights) for a fixed random projection.
Value weighted_sum(Value output, const Tensor& weights);

struct GradCheckResult {
  std::string op;
  double max_rel_err = 0.0;
  bool pass = false;
};

inline constexpr double kGradCheckTol = 1e-4;

// Finite-difference sweep over every differentiable op and composite block,
// three random shapes each. Runs in double precision.
std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed);

}  // namespace maskconver
