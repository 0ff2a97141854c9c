#include "pdse/parameters.hpp"

#include <cmath>
#include <stdexcept>

#include "pdse/rng.hpp"

namespace pdse {

Init Init::he(std::int64_t fan_in) {
  return normal(std::sqrt(2.0 / static_cast<double>(fan_in)));
}

template <typename T>
void ParameterStore<T>::claim(const std::string& name) {
  if (name.empty()) throw std::invalid_argument("parameter name must not be empty");
  if (!index_.emplace(name, params_.size() + buffers_.size()).second) {
    throw std::invalid_argument("duplicate parameter name '" + name + "'");
  }
}

template <typename T>
BasicTensor<T> ParameterStore<T>::add(const std::string& name, const Shape& shape, Init init) {
  claim(name);
  std::vector<T> values(static_cast<std::size_t>(shape_numel(shape)), T(0));
  switch (init.kind) {
    case Init::Kind::kZeros:
      break;
    case Init::Kind::kConstant:
      for (auto& v : values) v = static_cast<T>(init.value);
      break;
    case Init::Kind::kNormal: {
      Rng rng(derive_seed(seed_, name));
      for (auto& v : values) v = static_cast<T>(init.value * rng.normal());
      break;
    }
  }
  BasicTensor<T> tensor(shape, std::move(values), true);
  params_.push_back({name, tensor});
  return tensor;
}

template <typename T>
BasicTensor<T> ParameterStore<T>::add_buffer(const std::string& name, const Shape& shape, T value) {
  claim(name);
  auto tensor = BasicTensor<T>::full(shape, value);
  buffers_.push_back({name, tensor});
  return tensor;
}

template <typename T>
bool ParameterStore<T>::contains(const std::string& name) const {
  return index_.count(name) != 0;
}

template <typename T>
BasicTensor<T> ParameterStore<T>::get(const std::string& name) const {
  for (const auto* list : {&params_, &buffers_}) {
    for (const auto& entry : *list) {
      if (entry.name == name) return entry.tensor;
    }
  }
  throw std::out_of_range("unknown parameter '" + name + "'");
}

template <typename T>
std::int64_t ParameterStore<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template class ParameterStore<float>;
template class ParameterStore<double>;

}  // namespace pdse
