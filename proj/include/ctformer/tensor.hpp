// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

// Dense float tensors and the reverse-mode gradient tape.
//
// A Tensor is a reference-counted handle: copying it aliases the same
// storage, the way framework tensors behave. Use clone() for a deep copy.
// Operations in ops.hpp record themselves on the thread's active Tape when
// any input requires a gradient; with no active tape nothing is recorded,
// which is the inference mode.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctformer/error.hpp"
#include "ctformer/rng.hpp"

namespace ctformer {

class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;

  Shape(std::initializer_list<std::int64_t> dims) : Shape(std::span<const std::int64_t>(dims.begin(), dims.size())) {}

  explicit Shape(std::span<const std::int64_t> dims) {
    if (dims.size() > kMaxRank) {
      throw ShapeError("rank " + std::to_string(dims.size()) + " exceeds the maximum of 4");
    }
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (dims[i] < 0) throw ShapeError("negative dimension in shape");
      dims_[i] = dims[i];
    }
    rank_ = dims.size();
  }

  std::size_t rank() const noexcept { return rank_; }
  std::int64_t operator[](std::size_t i) const noexcept { return dims_[i]; }
  std::int64_t back() const noexcept { return rank_ == 0 ? 1 : dims_[rank_ - 1]; }

  /// Dimension counted from the end: from_back(0) is the last dimension.
  std::int64_t from_back(std::size_t i) const noexcept { return dims_[rank_ - 1 - i]; }

  std::int64_t numel() const noexcept {
    std::int64_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }

  std::span<const std::int64_t> dims() const noexcept { return {dims_.data(), rank_}; }

  bool operator==(const Shape& other) const noexcept {
    if (rank_ != other.rank_) return false;
    for (std::size_t i = 0; i < rank_; ++i) {
      if (dims_[i] != other.dims_[i]) return false;
    }
    return true;
  }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < rank_; ++i) {
      if (i) os << ',';
      os << dims_[i];
    }
    os << ']';
    return os.str();
  }

 private:
  std::array<std::int64_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

namespace detail {

struct TensorStorage {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool grad_touched = false;
};

}  // namespace detail

class Tape;

class Tensor {
 public:
  /// An empty rank-0 handle holding one zero.
  Tensor() : Tensor(Shape{}) {}

  explicit Tensor(const Shape& shape, float fill = 0.0F) : storage_(std::make_shared<detail::TensorStorage>()) {
    storage_->shape = shape;
    storage_->data.assign(static_cast<std::size_t>(shape.numel()), fill);
  }

  Tensor(const Shape& shape, std::vector<float> values) : storage_(std::make_shared<detail::TensorStorage>()) {
    if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + shape.str());
    }
    storage_->shape = shape;
    storage_->data = std::move(values);
  }

  static Tensor zeros(const Shape& shape) { return Tensor(shape, 0.0F); }
  static Tensor full(const Shape& shape, float value) { return Tensor(shape, value); }
  static Tensor scalar(float value) { return Tensor(Shape{}, value); }

  static Tensor randn(const Shape& shape, Rng& rng, float stddev = 1.0F) {
    Tensor t(shape);
    for (float& v : t.storage_->data) v = static_cast<float>(rng.normal() * stddev);
    return t;
  }

  static Tensor uniform(const Shape& shape, Rng& rng, float lo, float hi) {
    Tensor t(shape);
    for (float& v : t.storage_->data) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor eye(std::int64_t n) {
    Tensor t(Shape{n, n});
    for (std::int64_t i = 0; i < n; ++i) t.storage_->data[static_cast<std::size_t>(i * n + i)] = 1.0F;
    return t;
  }

  const Shape& shape() const noexcept { return storage_->shape; }
  std::size_t rank() const noexcept { return storage_->shape.rank(); }
  std::int64_t dim(std::size_t i) const noexcept { return storage_->shape[i]; }
  std::int64_t numel() const noexcept { return storage_->shape.numel(); }
  std::size_t size() const noexcept { return storage_->data.size(); }

  std::span<float> data() noexcept { return storage_->data; }
  std::span<const float> data() const noexcept { return storage_->data; }
  const std::vector<float>& values() const noexcept { return storage_->data; }

  float item() const {
    if (size() != 1) throw ContractError("item() requires a single-element tensor, got shape " + shape().str());
    return storage_->data[0];
  }

  float& operator[](std::size_t i) noexcept { return storage_->data[i]; }
  float operator[](std::size_t i) const noexcept { return storage_->data[i]; }

  /// Row-major element access by full index.
  template <typename... Idx>
  float& at(Idx... idx) {
    return storage_->data[offset_of({static_cast<std::int64_t>(idx)...})];
  }
  template <typename... Idx>
  float at(Idx... idx) const {
    return storage_->data[offset_of({static_cast<std::int64_t>(idx)...})];
  }

  bool requires_grad() const noexcept { return storage_->requires_grad; }

  /// Marks a leaf as trainable and allocates its gradient buffer.
  Tensor& set_requires_grad(bool on = true) {
    storage_->requires_grad = on;
    if (on && storage_->grad.size() != storage_->data.size()) storage_->grad.assign(storage_->data.size(), 0.0F);
    return *this;
  }

  bool is_leaf() const noexcept { return storage_->is_leaf; }
  bool has_grad() const noexcept { return storage_->grad.size() == storage_->data.size() && !storage_->data.empty(); }

  /// Gradient buffer; allocated (zero) on first access.
  std::span<float> grad() {
    ensure_grad();
    return storage_->grad;
  }
  std::span<const float> grad() const {
    ensure_grad();
    return storage_->grad;
  }

  /// The gradient as a detached tensor of the same shape.
  Tensor grad_tensor() const {
    ensure_grad();
    return Tensor(shape(), storage_->grad);
  }

  void zero_grad() {
    std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0F);
    storage_->grad_touched = false;
  }

  /// Overwrites every value in place; visible through all aliases.
  void fill(float value) { std::fill(storage_->data.begin(), storage_->data.end(), value); }

  /// Deep copy of values; the copy is a detached leaf.
  Tensor clone() const { return Tensor(shape(), storage_->data); }

  /// Same storage contents, new leaf handle that does not track gradients.
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& other) const noexcept { return storage_ == other.storage_; }

  bool all_finite() const {
    return std::all_of(storage_->data.begin(), storage_->data.end(), [](float v) { return std::isfinite(v); });
  }

  // Used by operations to wire up the tape.
  detail::TensorStorage& storage() noexcept { return *storage_; }
  const detail::TensorStorage& storage() const noexcept { return *storage_; }

  /// Accumulate into the gradient buffer. Used by backward closures.
  std::span<float> grad_for_accumulate() const {
    ensure_grad();
    storage_->grad_touched = true;
    return storage_->grad;
  }

 private:
  void ensure_grad() const {
    if (storage_->grad.size() != storage_->data.size()) storage_->grad.assign(storage_->data.size(), 0.0F);
  }

  std::size_t offset_of(std::initializer_list<std::int64_t> idx) const {
    const Shape& s = shape();
    if (idx.size() != s.rank()) throw ContractError("index rank does not match tensor rank");
    std::int64_t off = 0;
    std::size_t d = 0;
    for (std::int64_t i : idx) {
      if (i < 0 || i >= s[d]) throw ContractError("index out of range for shape " + s.str());
      off = off * s[d] + i;
      ++d;
    }
    return static_cast<std::size_t>(off);
  }

  std::shared_ptr<detail::TensorStorage> storage_;
};

/// A named trainable tensor.
struct Parameter {
  std::string name;
  Tensor value;
};

/// Ordered record of executed operations. Backward replays it in reverse.
/// A tape is confined to the thread that activates it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() {
    if (active_slot() == this) active_slot() = previous_;
  }

  /// RAII activation: operations on this thread record onto `tape` while the
  /// scope is alive.
  class Scope {
   public:
    explicit Scope(Tape& tape) : tape_(tape) {
      tape_.previous_ = active_slot();
      active_slot() = &tape_;
    }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
    ~Scope() { active_slot() = tape_.previous_; }

   private:
    Tape& tape_;
  };

  /// Suspends recording for the current thread.
  class Pause {
   public:
    Pause() : saved_(active_slot()) { active_slot() = nullptr; }
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;
    ~Pause() { active_slot() = saved_; }

   private:
    Tape* saved_;
  };

  static Tape* active() noexcept { return active_slot(); }

  void record(Tensor output, std::function<void()> backward_fn) {
    output.storage().is_leaf = false;
    output.storage().requires_grad = true;
    nodes_.push_back(Node{std::move(output), std::move(backward_fn)});
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

  /// Propagates d(loss)/d(x) into every reachable tensor that requires a
  /// gradient. Leaf gradients accumulate across calls; intermediate
  /// gradients are reset at the start of each call.
  void backward(Tensor loss) {
    if (loss.size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + loss.shape().str());
    }
    if (nodes_.empty()) throw ContractError("backward called on an empty tape");
    for (Node& n : nodes_) n.output.zero_grad();
    loss.grad_for_accumulate()[0] += 1.0F;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->output.storage().grad_touched) continue;
      it->backward();
    }
  }

 private:
  struct Node {
    Tensor output;
    std::function<void()> backward;
  };

  static Tape*& active_slot() noexcept {
    thread_local Tape* slot = nullptr;
    return slot;
  }

  std::vector<Node> nodes_;
  Tape* previous_ = nullptr;
};

/// Backward on the thread's active tape.
inline void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (tape == nullptr) throw ContractError("backward called with no active tape");
  tape->backward(loss);
}

}  // namespace ctformer
