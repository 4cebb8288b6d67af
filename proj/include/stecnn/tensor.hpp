#pragma once

#include "stecnn/common.hpp"
#include "stecnn/random.hpp"

#include <functional>
#include <initializer_list>
#include <memory>
#include <utility>
#include <vector>

namespace stecnn {

namespace detail {

template <typename Scalar>
struct TensorNode {
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  Shape shape;
  Storage values;
  Storage grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

inline thread_local int nograd_depth = 0;

}  // namespace detail

/// Scoped guard that disables tape recording on the current thread.
class NoGrad {
 public:
  NoGrad() { ++detail::nograd_depth; }
  ~NoGrad() { --detail::nograd_depth; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

inline bool grad_enabled() { return detail::nograd_depth == 0; }

/// Dense row-major tensor handle. Copies share storage; clone() deep-copies.
template <typename Scalar>
class Tensor {
 public:
  using Storage = typename detail::TensorNode<Scalar>::Storage;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), Scalar(0), requires_grad);
  }

  static Tensor ones(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), Scalar(1), requires_grad);
  }

  static Tensor filled(Shape shape, Scalar value, bool requires_grad = false) {
    Tensor t = empty(std::move(shape), requires_grad);
    t.node_->values.setConstant(value);
    return t;
  }

  static Tensor empty(Shape shape, bool requires_grad = false) {
    auto node = std::make_shared<detail::TensorNode<Scalar>>();
    node->shape = std::move(shape);
    node->values.resize(numel(node->shape));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(Scalar value, bool requires_grad = false) {
    return filled(Shape{}, value, requires_grad);
  }

  static Tensor from_flat(Shape shape, const std::vector<Scalar>& values,
                          bool requires_grad = false) {
    Tensor t = empty(std::move(shape), requires_grad);
    check(static_cast<Index>(values.size()) == t.size(), "from_flat: expected ", t.size(),
          " values for shape ", to_string(t.shape()), ", got ", values.size());
    for (Index i = 0; i < t.size(); ++i) t.node_->values[i] = values[static_cast<std::size_t>(i)];
    return t;
  }

  /// Uniform values in [lo, hi).
  static Tensor uniform(Shape shape, Scalar lo, Scalar hi, Rng& rng, bool requires_grad = false) {
    Tensor t = empty(std::move(shape), requires_grad);
    for (Index i = 0; i < t.size(); ++i)
      t.node_->values[i] = static_cast<Scalar>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, bool requires_grad = false) {
    Tensor t = empty(std::move(shape), requires_grad);
    for (Index i = 0; i < t.size(); ++i) t.node_->values[i] = static_cast<Scalar>(rng.normal());
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index size() const { return node_ ? node_->values.size() : 0; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Index dim(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }

  // A Tensor is a shared handle: const-ness is shallow, and copies alias the
  // same storage.
  Storage& values() const { return node_->values; }
  Scalar* data() const { return node_->values.data(); }

  Scalar value() const {
    check(size() == 1, "value(): tensor is not scalar, shape ", to_string(shape()));
    return node_->values[0];
  }

  Scalar& operator[](Index i) const { return node_->values[i]; }

  template <typename... Ix>
  Scalar& operator()(Ix... ix) const {
    return node_->values[offset({static_cast<Index>(ix)...})];
  }

  Index offset(std::initializer_list<Index> ix) const {
    check(ix.size() == node_->shape.size(), "index rank ", ix.size(), " does not match tensor rank ",
          node_->shape.size());
    Index flat = 0;
    auto it = ix.begin();
    for (std::size_t d = 0; d < node_->shape.size(); ++d, ++it) {
      flat = flat * node_->shape[d] + *it;
    }
    return flat;
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Tensor& set_requires_grad(bool v) const {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return node_ && node_->grad.size() == node_->values.size() && size() > 0; }

  /// Gradient buffer, zero-initialized on first access.
  Storage& grad() const {
    if (node_->grad.size() != node_->values.size()) {
      node_->grad.setZero(node_->values.size());
    }
    return node_->grad;
  }

  void zero_grad() const {
    if (node_) node_->grad.resize(0);
  }

  /// Deep copy detached from any recorded history.
  Tensor clone() const {
    Tensor t = empty(shape(), node_->requires_grad);
    t.node_->values = node_->values;
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> t = Tensor<T>::empty(shape(), node_->requires_grad);
    for (Index i = 0; i < size(); ++i) t[i] = static_cast<T>(node_->values[i]);
    return t;
  }

  const detail::TensorNode<Scalar>* node() const { return node_.get(); }

  friend bool same_storage(const Tensor& a, const Tensor& b) { return a.node_ == b.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode<Scalar>> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode<Scalar>> node_;
};

/// Execution-ordered record of differentiable operations. Forward passes
/// append entries; backward() replays them in reverse, accumulating gradients
/// additively across fan-out. One tape per thread per scalar type.
template <typename Scalar>
class Tape {
 public:
  static Tape& active() {
    static thread_local Tape tape;
    return tape;
  }

  void record(const char* op, std::function<void()> backward) {
    entries_.push_back(Entry{op, std::move(backward)});
  }

  void backward(Tensor<Scalar> loss) {
    check(loss.size() == 1, "backward: loss must be scalar, shape ", to_string(loss.shape()));
    if (consumed_) fail_runtime("backward: tape already consumed; call reset() first");
    check(loss.requires_grad(), "backward: loss is not connected to the tape");
    consumed_ = true;
    loss.grad()[0] += Scalar(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
  }

  void reset() {
    entries_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Entry {
    const char* op;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

/// True when recording is on and at least one argument tracks gradients.
template <typename Scalar, typename... Ts>
bool track_grad(const Tensor<Scalar>& first, const Ts&... rest) {
  if (!grad_enabled()) return false;
  return first.requires_grad() || (rest.requires_grad() || ... || false);
}

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  Tape<Scalar>::active().backward(loss);
}

template <typename Scalar>
void ensure_finite(const Tensor<Scalar>& t, const char* where) {
  if (!t.values().isFinite().all())
    fail_runtime("non-finite values detected in ", where);
}

}  // namespace stecnn
