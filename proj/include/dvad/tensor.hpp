#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dvad/error.hpp"

namespace dvad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor with shared storage.
///
/// Copies alias the same storage. Operations never write into their
/// inputs; only optimizers and loaders mutate parameter storage in place.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    for (auto extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
    }
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values)
      : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError(detail::concat("shape ", shape_str(shape), " holds ",
                                          shape_numel(shape), " values, got ",
                                          values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> data_mut() { return impl_->data; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (numel() != 1) {
      throw DimensionError("item() requires a single-element tensor, got " + shape_str(shape()));
    }
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (!on) impl_->grad.clear();
    return *this;
  }

  bool has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }
  std::span<const T> grad() const { return impl_->grad; }
  // Handle semantics: the gradient buffer belongs to the shared storage.
  std::span<T> grad_mut() const { return impl_->ensure_grad(); }
  void zero_grad() { impl_->grad.clear(); }

  /// Deep copy without autograd participation.
  Tensor detach() const { return Tensor(impl_->shape, impl_->data); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  detail::TensorImpl<T>* impl() const { return impl_.get(); }
  std::shared_ptr<detail::TensorImpl<T>> shared_impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Ordered record of differentiable operations.
///
/// `backward` replays the records in exact reverse order and then releases
/// them; calling it again before any new operation is recorded is an error.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) {
    records_.push_back(std::move(fn));
    consumed_ = false;
  }

  std::size_t size() const { return records_.size(); }

  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw DimensionError("backward requires a scalar loss, got " +
                           (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    if (consumed_) {
      throw std::logic_error("backward called twice without a new forward pass");
    }
    if (!loss.requires_grad()) {
      throw std::logic_error("loss does not depend on any tensor that requires grad");
    }
    loss.impl()->ensure_grad()[0] += T{1};
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    records_.clear();
    consumed_ = true;
  }

  /// Drops recorded operations without running them (e.g. after an
  /// evaluation pass that should not be differentiated).
  void clear() {
    records_.clear();
    consumed_ = false;
  }

 private:
  std::vector<BackwardFn> records_;
  bool consumed_ = false;
};

template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

/// Makes `tape` the recording target for the current thread while alive.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(active_tape<T>()) { active_tape<T>() = &tape; }
  ~TapeScope() { active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording for the current thread while alive.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape<T>()) { active_tape<T>() = nullptr; }
  ~NoGradScope() { active_tape<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <typename T, typename... Ts>
Tape<T>* recording_tape(const Tensor<T>& first, const Ts&... rest) {
  Tape<T>* tape = active_tape<T>();
  if (!tape) return nullptr;
  const bool any = first.requires_grad() || (rest.requires_grad() || ...);
  return any ? tape : nullptr;
}

}  // namespace detail

}  // namespace dvad
