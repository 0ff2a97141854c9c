#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pdse {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thrown for any tensor contract violation (shape mismatch, bad argument).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a forward op produces NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown for misuse of the reverse sweep (non-scalar loss, consumed record).
class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
struct TensorImpl;

/// One recorded operation. Holds its inputs and the closure that maps the
/// output gradient onto input gradients. `sequence` is globally increasing,
/// so sorting by it descending yields a valid reverse topological order.
template <typename T>
struct Node {
  /// input_grads[i] is null when input i does not take a gradient. The
  /// closure must accumulate (+=), never assign.
  using BackwardFn =
      std::function<void(std::span<const T> grad_output, std::span<std::vector<T>*> input_grads)>;

  std::uint64_t sequence = 0;
  const char* op_name = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  BackwardFn backward;
  bool consumed = false;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // empty when absent
  std::shared_ptr<Node<T>> grad_fn;
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy. T is float for training and double for gradient checking.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static BasicTensor zeros(const Shape& shape, bool requires_grad = false);
  static BasicTensor full(const Shape& shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t numel() const;

  std::span<const T> data() const;
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  BasicTensor& set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Deep copy of values; the copy is a fresh leaf without gradient.
  BasicTensor clone() const;
  /// Same values, detached from the recorded computation.
  BasicTensor detach() const;

  /// Reverse sweep from this scalar tensor.
  void backward() const;

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
  static BasicTensor from_impl(std::shared_ptr<TensorImpl<T>> impl);

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Disables recording while alive (inference, parameter updates).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_recording_enabled();

/// Toggles the finiteness check applied to every forward op output.
void set_finite_checks(bool on);
bool finite_checks_enabled();

/// Test hook: the reverse sweep negates the incoming gradient of every node
/// whose op name equals `op_name`. An empty name disables it.
void set_gradient_mutation(std::string op_name);
const std::string& gradient_mutation();

/// Builds an op output and, when recording and any input takes a gradient,
/// attaches a Node with the given backward closure.
template <typename T>
BasicTensor<T> make_op_result(const char* op_name, Shape shape, std::vector<T> values,
                              std::vector<BasicTensor<T>> inputs,
                              typename Node<T>::BackwardFn backward);

template <typename T>
BasicTensor<T> cast_tensor(const BasicTensor<float>& src);
template <typename T>
BasicTensor<T> cast_tensor(const BasicTensor<double>& src);

/// Little-endian "PDSET1" blob: magic, u32 rank, u32 extents, raw values.
template <typename T>
void write_tensor(std::ostream& out, const BasicTensor<T>& tensor);
template <typename T>
BasicTensor<T> read_tensor(std::istream& in);

}  // namespace pdse
