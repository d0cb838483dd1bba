#include "earnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

namespace earnet {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  return out.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<Impl>()) {
  for (auto extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
  }
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<Impl>()) {
  for (auto extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl().data[0];
}

template <typename T>
std::span<T> Tensor<T>::grad() {
  auto& self = impl();
  if (self.grad.empty()) self.grad.assign(self.data.size(), T{0});
  return self.grad;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  auto& self = impl();
  if (self.grad.empty()) throw ContractError("tensor has no gradient");
  return self.grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  auto& self = impl();
  std::fill(self.grad.begin(), self.grad.end(), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(shape(), std::vector<T>(data().begin(), data().end()));
}

template <typename T>
void Tape<T>::backward(Tensor<T>& loss) {
  if (loss.shape() != Shape{1}) {
    throw ContractError("backward() needs a scalar loss of shape [1], got " +
                        shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw ContractError("loss does not depend on any tracked tensor");
  loss.grad()[0] += T{1};
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

template <typename T>
void ensure_finite(std::span<const T> values, const std::string& where) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError("non-finite value at element " + std::to_string(i) + " in " + where);
    }
  }
}

namespace {

// Row-major strides of `shape`, with 0 where `bshape` broadcasts.
std::vector<std::size_t> broadcast_strides(const Shape& ashape, const Shape& bshape) {
  std::vector<std::size_t> strides(ashape.size(), 0);
  std::size_t stride = 1;
  for (std::size_t d = ashape.size(); d-- > 0;) {
    strides[d] = bshape[d] == 1 ? 0 : stride;
    stride *= bshape[d];
  }
  return strides;
}

// Maps every flat index of `ashape` to the flat index of the broadcast operand.
std::vector<std::size_t> broadcast_index(const Shape& ashape, const Shape& bshape) {
  const auto strides = broadcast_strides(ashape, bshape);
  const std::size_t n = shape_numel(ashape);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(ashape.size(), 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    index[i] = offset;
    for (std::size_t d = ashape.size(); d-- > 0;) {
      ++counter[d];
      offset += strides[d];
      if (counter[d] < ashape[d]) break;
      offset -= strides[d] * counter[d];
      counter[d] = 0;
    }
  }
  return index;
}

}  // namespace

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, Tape<T>* tape) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != bs.size()) {
    throw ShapeError("elementwise rank mismatch: " + shape_str(as) + " vs " + shape_str(bs));
  }
  bool same = true;
  for (std::size_t d = 0; d < as.size(); ++d) {
    if (bs[d] != as[d]) {
      same = false;
      if (bs[d] != 1) {
        throw ShapeError("cannot broadcast " + shape_str(bs) + " over " + shape_str(as));
      }
    }
  }

  Tensor<T> out(as);
  auto o = out.data();
  auto av = a.data();
  auto bv = b.data();
  std::vector<std::size_t> bidx;
  if (!same) bidx = broadcast_index(as, bs);
  const auto at_b = [&](std::size_t i) { return same ? i : bidx[i]; };

  if (kind == BinaryKind::add) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[at_b(i)];
  } else {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[at_b(i)];
  }
  ensure_finite<T>(o, "elementwise");

  if (should_record(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a = a, b = b, out, kind, bidx = std::move(bidx), same]() mutable {
      if (!out.has_grad()) return;
      auto g = std::as_const(out).grad();
      const auto idx = [&](std::size_t i) { return same ? i : bidx[i]; };
      if (a.requires_grad()) {
        auto ga = a.grad();
        if (kind == BinaryKind::add) {
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        } else {
          auto bv = std::as_const(b).data();
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[idx(i)];
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        if (kind == BinaryKind::add) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[idx(i)] += g[i];
        } else {
          auto av = std::as_const(a).data();
          for (std::size_t i = 0; i < g.size(); ++i) gb[idx(i)] += g[i] * av[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reduce(const Tensor<T>& x, const std::vector<std::size_t>& dims, ReduceKind kind,
                 Tape<T>* tape) {
  if (dims.empty()) return x;
  Shape oshape = x.shape();
  for (auto d : dims) {
    if (d >= oshape.size()) {
      throw ShapeError("reduce dimension " + std::to_string(d) + " invalid for " +
                       shape_str(x.shape()));
    }
    oshape[d] = 1;
  }
  Tensor<T> out(oshape);
  auto o = out.data();
  auto xv = x.data();
  const auto oidx = broadcast_index(x.shape(), oshape);
  const std::size_t count = x.numel() / out.numel();

  std::vector<std::size_t> argmax;
  if (kind == ReduceKind::mean) {
    for (std::size_t i = 0; i < xv.size(); ++i) o[oidx[i]] += xv[i];
    for (auto& v : o) v /= static_cast<T>(count);
  } else {
    std::fill(o.begin(), o.end(), -std::numeric_limits<T>::infinity());
    argmax.assign(o.size(), 0);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > o[oidx[i]]) {
        o[oidx[i]] = xv[i];
        argmax[oidx[i]] = i;
      }
    }
  }
  ensure_finite<T>(o, "reduce");

  if (should_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out, kind, oidx, argmax = std::move(argmax), count]() mutable {
      if (!out.has_grad()) return;
      auto g = std::as_const(out).grad();
      auto gx = x.grad();
      if (kind == ReduceKind::mean) {
        const T scale = T{1} / static_cast<T>(count);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[oidx[i]] * scale;
      } else {
        for (std::size_t j = 0; j < g.size(); ++j) gx[argmax[j]] += g[j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, Tape<T>* tape) {
  auto xv = x.data();
  T total{0};
  for (auto v : xv) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  if (should_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out]() mutable {
      if (!out.has_grad()) return;
      const T g = std::as_const(out).grad()[0];
      for (auto& v : x.grad()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape, Tape<T>* tape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (should_record(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x = x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = std::as_const(out).grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
std::vector<std::vector<T>> finite_diff_oracle(const std::function<T()>& f,
                                               std::vector<Tensor<T>> params, T eps) {
  if (!(eps > T{0})) throw ContractError("finite-difference step must be positive");
  std::vector<std::vector<T>> grads;
  grads.reserve(params.size());
  for (auto& p : params) {
    auto values = p.data();
    std::vector<T> g(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = saved + eps;
      const T up = f();
      values[i] = saved - eps;
      const T down = f();
      values[i] = saved;
      g[i] = (up - down) / (T{2} * eps);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

#define EARNET_INSTANTIATE(T)                                                                   \
  template class Tensor<T>;                                                                     \
  template class Tape<T>;                                                                       \
  template void ensure_finite<T>(std::span<const T>, const std::string&);                       \
  template Tensor<T> elementwise<T>(const Tensor<T>&, const Tensor<T>&, BinaryKind, Tape<T>*);  \
  template Tensor<T> reduce<T>(const Tensor<T>&, const std::vector<std::size_t>&, ReduceKind,   \
                               Tape<T>*);                                                       \
  template Tensor<T> sum<T>(const Tensor<T>&, Tape<T>*);                                        \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape, Tape<T>*);                             \
  template std::vector<std::vector<T>> finite_diff_oracle<T>(const std::function<T()>&,        \
                                                             std::vector<Tensor<T>>, T);

EARNET_INSTANTIATE(float)
EARNET_INSTANTIATE(double)

#undef EARNET_INSTANTIATE

}  // namespace earnet
