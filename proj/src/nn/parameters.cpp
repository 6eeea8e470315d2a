#include "brainseg/nn/parameters.hpp"

#include <cmath>

namespace brainseg::nn {

template <typename T>
Var<T> ParameterStore<T>::add(const std::string& name, Shape shape) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  Tensor<T> value(shape);
  Parameter<T> p{name, Var<T>(std::move(value), true), Tensor<T>(shape)};
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return params_.back().value;
}

template <typename T>
Parameter<T>& ParameterStore<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
  return params_[it->second];
}

template <typename T>
const Parameter<T>& ParameterStore<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
  return params_[it->second];
}

template <typename T>
std::size_t ParameterStore<T>::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.value().size();
  return n;
}

template <typename T>
void ParameterStore<T>::set_trainable(const std::vector<std::string>& frozen_prefixes) {
  for (auto& p : params_) {
    bool frozen = false;
    for (const auto& prefix : frozen_prefixes) {
      if (p.name.rfind(prefix, 0) == 0) frozen = true;
    }
    p.value.set_requires_grad(!frozen);
    if (frozen) p.value.zero_grad();
  }
}

template <typename T>
std::vector<Parameter<T>*> ParameterStore<T>::trainable() {
  std::vector<Parameter<T>*> out;
  for (auto& p : params_) {
    if (p.value.requires_grad()) out.push_back(&p);
  }
  return out;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template <typename T>
void init_uniform(Tensor<T>& weight, int fan_in, double gain, std::mt19937_64& rng) {
  const double bound = gain / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : weight.values()) v = static_cast<T>(dist(rng));
}

double role_gain(InitRole role) {
  switch (role) {
    case InitRole::kRelu:
      return std::sqrt(6.0);
    case InitRole::kLinear:
      return std::sqrt(3.0);
    case InitRole::kResidualEnd:
      return 1.0;
    case InitRole::kPredictor:
      return 0.1;
  }
  return 1.0;
}

template <typename T>
void sgd_step(const std::vector<Parameter<T>*>& params, double learning_rate, double momentum) {
  for (const Parameter<T>* p : params) {
    if (!p->value.has_grad()) {
      throw ValidationError("sgd_step: parameter '" + p->name + "' has no gradient");
    }
  }
  const T lr = static_cast<T>(learning_rate);
  const T mu = static_cast<T>(momentum);
  for (Parameter<T>* p : params) {
    Var<T>& v = p->value;
    if (p->momentum.shape() != v.shape()) p->momentum = Tensor<T>(v.shape());
    T* buf = p->momentum.data();
    T* val = v.mutable_value().data();
    const T* g = v.grad().data();
    for (std::size_t i = 0; i < p->momentum.size(); ++i) {
      buf[i] = mu * buf[i] + g[i];
      val[i] -= lr * buf[i];
    }
    v.zero_grad();
  }
}

template <typename T>
double grad_norm(const std::vector<Parameter<T>*>& params) {
  double acc = 0.0;
  for (const Parameter<T>* p : params) {
    if (!p->value.has_grad()) continue;
    for (T g : p->value.grad().values()) acc += static_cast<double>(g) * g;
  }
  return std::sqrt(acc);
}

template <typename T>
void clip_grad_norm(const std::vector<Parameter<T>*>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (!(norm > max_norm) || !std::isfinite(norm)) return;
  const T factor = static_cast<T>(max_norm / norm);
  for (Parameter<T>* p : params) {
    if (!p->value.has_grad()) continue;
    for (T& g : p->value.grad_buffer().values()) g *= factor;
  }
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template void init_uniform<float>(Tensor<float>&, int, double, std::mt19937_64&);
template void init_uniform<double>(Tensor<double>&, int, double, std::mt19937_64&);
template void sgd_step<float>(const std::vector<Parameter<float>*>&, double, double);
template void sgd_step<double>(const std::vector<Parameter<double>*>&, double, double);
template double grad_norm<float>(const std::vector<Parameter<float>*>&);
template double grad_norm<double>(const std::vector<Parameter<double>*>&);
template void clip_grad_norm<float>(const std::vector<Parameter<float>*>&, double);
template void clip_grad_norm<double>(const std::vector<Parameter<double>*>&, double);

}  // namespace brainseg::nn
