#include "pdse/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

namespace pdse {

namespace {

thread_local bool g_recording = true;
std::atomic<bool> g_finite_checks{true};
std::string g_mutated_op;
std::atomic<std::uint64_t> g_sequence{0};

constexpr char kTensorMagic[6] = {'P', 'D', 'S', 'E', 'T', '1'};

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }
bool grad_recording_enabled() { return g_recording; }

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks_enabled() { return g_finite_checks; }
void set_gradient_mutation(std::string op_name) { g_mutated_op = std::move(op_name); }
const std::string& gradient_mutation() { return g_mutated_op; }

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto extent : shape) {
    if (extent <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  impl_ = std::make_shared<TensorImpl<T>>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  return BasicTensor(shape, std::vector<T>(static_cast<std::size_t>(std::max<std::int64_t>(0, shape_numel(shape))), value),
                     requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{1}, {value}, requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_impl(std::shared_ptr<TensorImpl<T>> impl) {
  BasicTensor t;
  t.impl_ = std::move(impl);
  return t;
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
  if (!impl_) throw ShapeError("use of undefined tensor");
  return impl_->shape;
}

template <typename T>
std::int64_t BasicTensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

template <typename T>
std::int64_t BasicTensor<T>::numel() const {
  return static_cast<std::int64_t>(impl_ ? impl_->data.size() : 0);
}

template <typename T>
std::span<const T> BasicTensor<T>::data() const {
  if (!impl_) throw ShapeError("use of undefined tensor");
  return impl_->data;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
  if (!impl_) throw ShapeError("use of undefined tensor");
  return impl_->data;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for shape " + shape_str(s));
  std::int64_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= s[axis]) throw ShapeError("index out of range for shape " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl_->data[static_cast<std::size_t>(flat)];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
  if (!impl_) throw ShapeError("use of undefined tensor");
  if (impl_->grad_fn) throw AutogradError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = on;
  return *this;
}

template <typename T>
bool BasicTensor<T>::is_leaf() const {
  return impl_ && !impl_->grad_fn;
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
  return impl_ && !impl_->grad.empty();
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!has_grad()) throw AutogradError("tensor has no gradient");
  return impl_->grad;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() {
  if (!impl_) throw ShapeError("use of undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  if (impl_) impl_->grad.clear();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return BasicTensor(shape(), impl_->data, false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return clone();
}

template <typename T>
void BasicTensor<T>::backward() const {
  if (!impl_) throw AutogradError("backward on undefined tensor");
  if (impl_->data.size() != 1) {
    throw AutogradError("backward requires a scalar loss, got shape " + shape_str(impl_->shape));
  }
  if (impl_->grad_fn && impl_->grad_fn->consumed) {
    throw AutogradError("backward called twice: the computation record was already consumed");
  }
  if (!impl_->requires_grad) {
    throw AutogradError("loss does not depend on any tensor that requires a gradient");
  }

  // Collect every recorded tensor reachable from the loss. Shared ownership
  // keeps interior tensors alive while consumed nodes drop their inputs.
  std::vector<std::shared_ptr<TensorImpl<T>>> order;
  std::unordered_set<TensorImpl<T>*> seen;
  std::vector<std::shared_ptr<TensorImpl<T>>> stack{impl_};
  while (!stack.empty()) {
    auto cur = std::move(stack.back());
    stack.pop_back();
    if (!cur->grad_fn || !seen.insert(cur.get()).second) continue;
    if (cur->grad_fn->consumed) {
      throw AutogradError(std::string("computation record of op '") + cur->grad_fn->op_name +
                          "' was already consumed by a previous backward");
    }
    for (auto& in : cur->grad_fn->inputs) {
      if (in->requires_grad) stack.push_back(in);
    }
    order.push_back(std::move(cur));
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    return a->grad_fn->sequence > b->grad_fn->sequence;
  });

  if (impl_->grad.empty()) impl_->grad.assign(1, T(0));
  impl_->grad[0] += T(1);

  std::vector<std::vector<T>*> input_grads;
  for (auto& cur : order) {
    auto& node = *cur->grad_fn;
    if (!cur->grad.empty()) {
      input_grads.clear();
      for (auto& in : node.inputs) {
        if (in->requires_grad) {
          if (in->grad.empty()) in->grad.assign(in->data.size(), T(0));
          input_grads.push_back(&in->grad);
        } else {
          input_grads.push_back(nullptr);
        }
      }
      if (!g_mutated_op.empty() && g_mutated_op == node.op_name) {
        std::vector<T> flipped(cur->grad.size());
        std::transform(cur->grad.begin(), cur->grad.end(), flipped.begin(), [](T v) { return -v; });
        node.backward(std::span<const T>(flipped), std::span<std::vector<T>*>(input_grads));
      } else {
        node.backward(std::span<const T>(cur->grad), std::span<std::vector<T>*>(input_grads));
      }
    }
    // Interior gradients are scratch; only leaves keep theirs.
    if (cur != impl_) {
      cur->grad.clear();
      cur->grad.shrink_to_fit();
    }
    node.backward = nullptr;
    node.inputs.clear();
    node.consumed = true;
  }
}

template <typename T>
BasicTensor<T> make_op_result(const char* op_name, Shape shape, std::vector<T> values,
                              std::vector<BasicTensor<T>> inputs,
                              typename Node<T>::BackwardFn backward) {
  if (g_finite_checks) {
    for (const T& v : values) {
      if (!std::isfinite(v)) {
        throw NonFiniteError(std::string("non-finite value produced by op '") + op_name +
                             "' with output shape " + shape_str(shape));
      }
    }
  }
  BasicTensor<T> out(std::move(shape), std::move(values), false);
  if (!g_recording) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;

  auto node = std::make_shared<Node<T>>();
  node->sequence = ++g_sequence;
  node->op_name = op_name;
  node->backward = std::move(backward);
  node->inputs.reserve(inputs.size());
  for (const auto& in : inputs) node->inputs.push_back(in.impl());
  out.impl()->grad_fn = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

template <typename T>
BasicTensor<T> cast_tensor(const BasicTensor<float>& src) {
  std::vector<T> values(src.data().begin(), src.data().end());
  return BasicTensor<T>(src.shape(), std::move(values));
}

template <typename T>
BasicTensor<T> cast_tensor(const BasicTensor<double>& src) {
  std::vector<T> values(src.numel());
  std::transform(src.data().begin(), src.data().end(), values.begin(),
                 [](double v) { return static_cast<T>(v); });
  return BasicTensor<T>(src.shape(), std::move(values));
}

template <typename T>
void write_tensor(std::ostream& out, const BasicTensor<T>& tensor) {
  out.write(kTensorMagic, sizeof(kTensorMagic));
  const auto rank = static_cast<std::uint32_t>(tensor.rank());
  out.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
  for (auto extent : tensor.shape()) {
    const auto e = static_cast<std::uint32_t>(extent);
    out.write(reinterpret_cast<const char*>(&e), sizeof(e));
  }
  out.write(reinterpret_cast<const char*>(tensor.data().data()),
            static_cast<std::streamsize>(tensor.numel() * sizeof(T)));
  if (!out) throw std::runtime_error("tensor write failed");
}

template <typename T>
BasicTensor<T> read_tensor(std::istream& in) {
  char magic[sizeof(kTensorMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kTensorMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("bad tensor blob: missing PDSET1 magic");
  }
  std::uint32_t rank = 0;
  if (!in.read(reinterpret_cast<char*>(&rank), sizeof(rank)) || rank == 0 || rank > 8) {
    throw std::runtime_error("bad tensor blob: invalid rank");
  }
  Shape shape(rank);
  for (auto& extent : shape) {
    std::uint32_t e = 0;
    if (!in.read(reinterpret_cast<char*>(&e), sizeof(e)) || e == 0) {
      throw std::runtime_error("bad tensor blob: invalid extent");
    }
    extent = e;
  }
  std::vector<T> values(static_cast<std::size_t>(shape_numel(shape)));
  if (!in.read(reinterpret_cast<char*>(values.data()),
               static_cast<std::streamsize>(values.size() * sizeof(T)))) {
    throw std::runtime_error("bad tensor blob: truncated values for shape " + shape_str(shape));
  }
  return BasicTensor<T>(std::move(shape), std::move(values));
}

template class BasicTensor<float>;
template class BasicTensor<double>;

#define PDSE_INSTANTIATE(T)                                                                     \
  template BasicTensor<T> make_op_result<T>(const char*, Shape, std::vector<T>,                 \
                                            std::vector<BasicTensor<T>>,                        \
                                            typename Node<T>::BackwardFn);                      \
  template BasicTensor<T> cast_tensor<T>(const BasicTensor<float>&);                            \
  template BasicTensor<T> cast_tensor<T>(const BasicTensor<double>&);                           \
  template void write_tensor<T>(std::ostream&, const BasicTensor<T>&);                          \
  template BasicTensor<T> read_tensor<T>(std::istream&);

PDSE_INSTANTIATE(float)
PDSE_INSTANTIATE(double)
#undef PDSE_INSTANTIATE

}  // namespace pdse
