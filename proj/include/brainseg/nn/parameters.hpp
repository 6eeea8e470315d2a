#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "brainseg/nn/autograd.hpp"

namespace brainseg::nn {

template <typename T>
struct Parameter {
  std::string name;  // layer-scoped path, e.g. "backbone.stage2.block0.conv1.weight"
  Var<T> value;
  Tensor<T> momentum;
};

/// Owns every trainable tensor of a model, in registration order.
template <typename T>
class ParameterStore {
 public:
  /// Registers a zero-initialized parameter. Throws ConfigError on a
  /// duplicate name. The returned Var shares storage with the store.
  Var<T> add(const std::string& name, Shape shape);

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }
  Parameter<T>& at(const std::string& name);
  const Parameter<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t count() const;  // total scalar count

  /// Enables gradients exactly for parameters whose name does not start with
  /// any of `frozen_prefixes`.
  void set_trainable(const std::vector<std::string>& frozen_prefixes);
  std::vector<Parameter<T>*> trainable();
  void zero_grad();

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Fills `weight` from U(-gain/sqrt(fan_in), gain/sqrt(fan_in)); draws are
/// made in double so float and double models initialize identically.
template <typename T>
void init_uniform(Tensor<T>& weight, int fan_in, double gain, std::mt19937_64& rng);

/// What a layer's output feeds; sets the base gain for init_uniform.
enum class InitRole {
  kRelu,         // followed by a ReLU: variance preserving
  kLinear,       // linear output (lateral, smoothing, projection)
  kResidualEnd,  // last layer of a residual branch, damped
  kPredictor,    // class logits, box deltas, mask logits, damped
};
double role_gain(InitRole role);

/// buffer <- momentum*buffer + grad; value <- value - lr*buffer; then the
/// gradient is cleared. Throws ValidationError naming any parameter that has
/// no gradient.
template <typename T>
void sgd_step(const std::vector<Parameter<T>*>& params, double learning_rate, double momentum);

/// Global L2 norm of the gradients (missing gradients count as zero).
template <typename T>
double grad_norm(const std::vector<Parameter<T>*>& params);

/// Rescales all gradients so their global norm is at most `max_norm`.
template <typename T>
void clip_grad_norm(const std::vector<Parameter<T>*>& params, double max_norm);

}  // namespace brainseg::nn
