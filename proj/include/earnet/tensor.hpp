#pragma once

// Dense row-major tensor with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap shared handle: copies alias the same storage. Ops never
// mutate their inputs; each op allocates its output and, when a Tape is given
// and some input requires a gradient, records a closure that accumulates into
// the inputs' gradient buffers during Tape::backward.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "earnet/errors.hpp"

namespace earnet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t i) const { return impl().shape.at(i); }
  std::size_t numel() const { return impl().data.size(); }

  std::span<T> data() { return impl().data; }
  std::span<const T> data() const { return impl().data; }
  T* ptr() { return impl().data.data(); }
  const T* ptr() const { return impl().data.data(); }
  T item() const;

  bool requires_grad() const { return defined() && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl().requires_grad = on;
    return *this;
  }

  bool has_grad() const { return defined() && !impl_->grad.empty(); }
  // Mutable access allocates a zero-filled buffer on first use.
  std::span<T> grad();
  std::span<const T> grad() const;
  void zero_grad();
  void clear_grad() { impl().grad = {}; }

  // Deep copy of values; the copy does not require a gradient.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  Impl& impl() const {
    if (!impl_) throw ContractError("use of undefined tensor");
    return *impl_;
  }

  std::shared_ptr<Impl> impl_;
};

// Ordered record of backward closures. Recording order is execution order, so
// every op's inputs were produced by earlier entries (or are leaves).
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) { ops_.push_back(std::move(fn)); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. The loss must
  // be a one-element tensor of shape [1].
  void backward(Tensor<T>& loss);

  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

 private:
  std::vector<BackwardFn> ops_;
};

// True when an op with these inputs has to be recorded on `tape`.
template <typename T>
bool should_record(const Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
  if (tape == nullptr) return false;
  for (const auto* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Throws NumericError naming `where` if any element is NaN or infinite.
template <typename T>
void ensure_finite(std::span<const T> values, const std::string& where);

enum class BinaryKind { add, mul };
enum class ReduceKind { mean, max };

// a (op) b, with b broadcast over a along dimensions where b has extent 1.
template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind,
                      Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  return elementwise(a, b, BinaryKind::add, tape);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  return elementwise(a, b, BinaryKind::mul, tape);
}

// Reduces over `dims`, keeping them as extent-1 dimensions. An empty
// dimension set returns the input handle unchanged.
template <typename T>
Tensor<T> reduce(const Tensor<T>& x, const std::vector<std::size_t>& dims, ReduceKind kind,
                 Tape<T>* tape = nullptr);

// Sum of all elements as a [1] tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x, Tape<T>* tape = nullptr);

// Same values, new shape with identical element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape, Tape<T>* tape = nullptr);

// Central differences (f(p+eps) - f(p-eps)) / (2 eps) for every scalar of
// every tensor in `params`. `f` must be deterministic: freeze any sampling
// (DropBlock, BN batch statistics) before calling. Parameters are restored.
template <typename T>
std::vector<std::vector<T>> finite_diff_oracle(const std::function<T()>& f,
                                               std::vector<Tensor<T>> params, T eps);

}  // namespace earnet
