#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cpmamba {

using Shape = std::vector<std::size_t>;

/// Raised when tensor shapes do not satisfy an operation's contract.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <class T>
class GradientTape;
template <class T>
class NoGradGuard;

namespace detail {

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until an adjoint is accumulated
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major array with an optional gradient buffer.
///
/// Copies share storage (handle semantics); use clone() for a deep copy.
/// Operations involving a tensor with requires_grad() record their adjoints
/// on the thread's active GradientTape, if any.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : impl_(std::make_shared<detail::TensorImpl<T>>()) {}

  explicit Tensor(Shape shape) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    impl_->data.assign(cpmamba::numel(shape), T{0});
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    if (cpmamba::numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + to_string(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t(std::move(shape));
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  const Shape& shape() const noexcept { return impl_->shape; }
  std::size_t dim() const noexcept { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const noexcept { return impl_->data.size(); }

  std::span<T> data() noexcept { return impl_->data; }
  std::span<const T> data() const noexcept { return impl_->data; }
  std::vector<T>& values() noexcept { return impl_->data; }
  const std::vector<T>& values() const noexcept { return impl_->data; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + to_string(shape()));
    return impl_->data[0];
  }

  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const noexcept { return impl_->requires_grad; }
  void set_requires_grad(bool flag) noexcept { impl_->requires_grad = flag; }

  bool has_grad() const noexcept { return !impl_->grad.empty(); }

  /// Gradient buffer, allocated as zeros on first access. Constness of the
  /// handle does not extend to the gradient.
  std::span<T> grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T{0});
    return impl_->grad;
  }
  /// Read-only view without allocation; empty when no gradient was recorded.
  std::span<const T> grad_values() const noexcept { return impl_->grad; }

  void zero_grad() const { std::fill(impl_->grad.begin(), impl_->grad.end(), T{0}); }
  void drop_grad() { impl_->grad.clear(); impl_->grad.shrink_to_fit(); }

  /// Deep copy of data (and requires_grad flag); gradient not copied.
  Tensor clone() const { return Tensor(shape(), impl_->data, requires_grad()); }

  /// Copy of data that never requires grad.
  Tensor detach() const { return Tensor(shape(), impl_->data, false); }

  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(impl_->data.begin(), impl_->data.end());
    return Tensor<U>(shape(), std::move(out), requires_grad());
  }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Ordered record of adjoint closures for the operations executed while the
/// tape is active on the current thread.
///
/// Constructing a tape makes it the active one; destruction restores the
/// previously active tape. With no active tape operations run forward-only.
template <class T>
class GradientTape {
 public:
  GradientTape() : previous_(active_) { active_ = this; }
  ~GradientTape() { active_ = previous_; }
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  static GradientTape* active() noexcept { return active_; }

  void record(std::function<void()> adjoint) { entries_.push_back(std::move(adjoint)); }

  std::size_t size() const noexcept { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) with `seed`, replays adjoints in reverse order and
  /// clears the tape.
  void backward(Tensor<T> loss, T seed = T{1}) {
    if (loss.numel() != 1) {
      throw DimensionError("backward() requires a scalar loss, got " + to_string(loss.shape()));
    }
    loss.grad()[0] += seed;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
  }

 private:
  std::vector<std::function<void()>> entries_;
  GradientTape* previous_;
  static inline thread_local GradientTape* active_ = nullptr;
  friend class NoGradGuard<T>;
};

/// Suspends recording for its lifetime (inference, finite differences).
template <class T>
class NoGradGuard {
 public:
  NoGradGuard() : saved_(GradientTape<T>::active_) { GradientTape<T>::active_ = nullptr; }
  ~NoGradGuard() { GradientTape<T>::active_ = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  GradientTape<T>* saved_;
};

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* t : inputs)
    if (t != nullptr && t->requires_grad()) return true;
  return false;
}

/// Registers `adjoint` on the active tape when any input requires grad and
/// marks `out` accordingly. The closure reads out.grad() and accumulates into
/// the inputs' grad() buffers.
template <class T, class F>
void record(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs, F&& adjoint) {
  auto* tape = GradientTape<T>::active();
  if (tape == nullptr || !any_requires_grad<T>(inputs)) return;
  out.set_requires_grad(true);
  tape->record(std::forward<F>(adjoint));
}

}  // namespace detail

}  // namespace cpmamba
