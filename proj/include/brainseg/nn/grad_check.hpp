#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "brainseg/nn/autograd.hpp"

namespace brainseg::nn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t input = 0;  // where the worst coordinate lives
  std::size_t index = 0;
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences (f(x+eps) - f(x-eps)) / (2 eps), one coordinate at a time.
/// Per-coordinate relative error is |a - n| / max(|a|, |n|, floor).
/// Throws ValidationError when the function or a gradient is non-finite.
template <typename T>
GradCheckResult grad_check(const std::function<Var<T>(const std::vector<Var<T>>&)>& fn,
                           const std::vector<Tensor<T>>& inputs, double eps,
                           double floor = 1e-6);

}  // namespace brainseg::nn
