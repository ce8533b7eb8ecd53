// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "omni/error.hpp"

namespace omni {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  bool is_leaf = true;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor with shared ownership of its storage.
///
/// Copies alias the same storage (like a handle). Use clone() for a deep copy.
/// A default-constructed tensor is null; most accessors require a non-null
/// tensor.
template <typename T>
class Tensor {
 public:
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("zero-sized dimension in " + shape_str(shape));
    }
    auto impl = std::make_shared<Impl>();
    impl->data.assign(shape_numel(shape), T(0));
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
  }

  static Tensor full(Shape shape, T value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    Tensor t = zeros(std::move(shape));
    t.impl_->data = std::move(values);
    return t;
  }

  static Tensor scalar(T value) { return from({1}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t rows() const { return impl_->shape.front(); }
  std::size_t cols() const { return impl_->shape.size() > 1 ? impl_->shape[1] : 1; }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> data() { return impl_->data; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  T at(std::size_t i, std::size_t j) const { return impl_->data[i * cols() + j]; }
  T& at(std::size_t i, std::size_t j) { return impl_->data[i * cols() + j]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return impl_->is_leaf; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> grad_mut() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }

  /// Deep copy of values; the copy is a fresh leaf without gradient.
  Tensor clone() const {
    Tensor t = from(shape(), impl_->data);
    return t;
  }
  /// Leaf aliasing nothing on the tape. Same as clone() but keeps intent clear.
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  Impl* impl() const { return impl_.get(); }
  const std::shared_ptr<Impl>& shared_impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  std::shared_ptr<Impl> impl_;
};

/// Ordered record of differentiable operations for one forward pass.
///
/// Ops executed while a tape is installed (see TapeScope) append an entry when
/// any input requires grad. backward() replays entries in reverse; since an
/// entry's inputs always exist before it is recorded, the order is
/// topological.
template <typename T>
class Tape {
 public:
  using Impl = detail::TensorImpl<T>;

  struct Entry {
    std::vector<std::shared_ptr<Impl>> inputs;
    std::shared_ptr<Impl> output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::vector<std::shared_ptr<Impl>> inputs,
              std::shared_ptr<Impl> output, std::function<void()> fn) {
    entries_.push_back({std::move(inputs), std::move(output), std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  /// Populates grads of every leaf that requires grad. Leaf gradients
  /// accumulate across calls; intermediate gradients are reset each call.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("null")));
    }
    if (!loss.requires_grad()) {
      throw ContractError("backward() on a loss that does not require grad");
    }
    bool found = loss.is_leaf();
    for (auto& e : entries_) {
      e.output->grad.clear();
      if (e.output.get() == loss.impl()) found = true;
    }
    if (!found) throw ContractError("backward(): loss was not produced on this tape");
    loss.impl()->grad_buffer()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // no path to the loss
      it->backward();
    }
  }

  static Tape* current() { return current_; }

 private:
  template <typename U>
  friend class TapeScope;

  std::vector<Entry> entries_;
  static inline thread_local Tape* current_ = nullptr;
};

/// Installs a tape as the current one for this thread; restores the previous
/// tape on destruction. A null tape suspends recording.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>* tape) : prev_(Tape<T>::current_) {
    Tape<T>::current_ = tape;
  }
  explicit TapeScope(Tape<T>& tape) : TapeScope(&tape) {}
  ~TapeScope() { Tape<T>::current_ = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

template <typename T>
class NoGradScope {
 public:
  NoGradScope() : scope_(static_cast<Tape<T>*>(nullptr)) {}

 private:
  TapeScope<T> scope_;
};

}  // namespace omni
