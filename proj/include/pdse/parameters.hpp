#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "pdse/tensor.hpp"

namespace pdse {

struct Init {
  enum class Kind { kZeros, kConstant, kNormal };
  Kind kind = Kind::kZeros;
  double value = 0.0;  // constant value or normal standard deviation

  static Init zeros() { return {Kind::kZeros, 0.0}; }
  static Init constant(double v) { return {Kind::kConstant, v}; }
  static Init normal(double stddev) { return {Kind::kNormal, stddev}; }
  /// He initialization for a conv/linear layer with the given fan-in.
  static Init he(std::int64_t fan_in);
};

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> tensor;
};

/// Owns every learnable tensor of a model under a unique dotted name.
/// Each tensor is initialized from a stream seeded by (seed, name), so two
/// stores with the same seed agree on every name they share regardless of
/// which other parameters exist.
template <typename T>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  BasicTensor<T> add(const std::string& name, const Shape& shape, Init init);
  /// Non-learned state (e.g. batch-norm running statistics) saved with checkpoints.
  BasicTensor<T> add_buffer(const std::string& name, const Shape& shape, T value);

  const std::vector<NamedTensor<T>>& parameters() const { return params_; }
  const std::vector<NamedTensor<T>>& buffers() const { return buffers_; }
  bool contains(const std::string& name) const;
  BasicTensor<T> get(const std::string& name) const;
  std::uint64_t seed() const { return seed_; }
  std::int64_t parameter_count() const;

  void zero_grad();

 private:
  void claim(const std::string& name);

  std::uint64_t seed_;
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace pdse
