#include "brainseg/nn/grad_check.hpp"

#include <cmath>

#include "brainseg/nn/ops.hpp"

namespace brainseg::nn {

namespace {

template <typename T>
double evaluate(const std::function<Var<T>(const std::vector<Var<T>>&)>& fn,
                const std::vector<Tensor<T>>& inputs) {
  std::vector<Var<T>> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.emplace_back(t, false);
  const Var<T> out = fn(vars);
  if (out.value().size() != 1) throw ValidationError("grad_check: function must return a scalar");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw ValidationError("grad_check: function value is not finite");
  return v;
}

}  // namespace

template <typename T>
GradCheckResult grad_check(const std::function<Var<T>(const std::vector<Var<T>>&)>& fn,
                           const std::vector<Tensor<T>>& inputs, double eps, double floor) {
  if (!(eps > 0.0)) throw ValidationError("grad_check: eps must be positive");

  std::vector<Var<T>> vars;
  for (const auto& t : inputs) vars.emplace_back(t, true);
  const Var<T> out = fn(vars);
  if (out.value().size() != 1) throw ValidationError("grad_check: function must return a scalar");
  backward(out);

  GradCheckResult result;
  std::vector<Tensor<T>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const bool has = vars[k].has_grad();
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double analytic = has ? static_cast<double>(vars[k].grad()[i]) : 0.0;
      if (!std::isfinite(analytic)) throw ValidationError("grad_check: analytic gradient is not finite");
      const T x0 = probe[k][i];
      probe[k][i] = static_cast<T>(x0 + eps);
      const double up = evaluate(fn, probe);
      probe[k][i] = static_cast<T>(x0 - eps);
      const double down = evaluate(fn, probe);
      probe[k][i] = x0;
      const double numeric = (up - down) / (2.0 * eps);
      const double abs_err = std::abs(analytic - numeric);
      const double rel = abs_err / std::max({std::abs(analytic), std::abs(numeric), floor});
      ++result.coordinates;
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.input = k;
        result.index = i;
      }
    }
  }
  return result;
}

template GradCheckResult grad_check<float>(const std::function<Var<float>(const std::vector<Var<float>>&)>&,
                                           const std::vector<Tensor<float>>&, double, double);
template GradCheckResult grad_check<double>(
    const std::function<Var<double>(const std::vector<Var<double>>&)>&,
    const std::vector<Tensor<double>>&, double, double);

}  // namespace brainseg::nn
