// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode automatic differentiation over Tensor<T>.
//
// Every operation records a node holding its forward value and a backward
// function. Backward functions are written in terms of the same differentiable
// operations, so running grad() with retain=true yields gradients that are
// themselves graph nodes and can be differentiated again (double backprop).
// With retain=false the backward pass runs with recording disabled and the
// returned gradients are constants.
//
// A graph is confined to the thread that built it.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "droaug/errors.hpp"
#include "droaug/tensor.hpp"

namespace droaug {

template <class T>
struct Node;

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  /// Graph entry point. Parameters and differentiated inputs use requires_grad=true.
  static Var leaf(Tensor<T> value, bool requires_grad = false);
  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const;
  /// In-place access for optimizers. Only valid while no pass is in flight.
  Tensor<T>& mutable_value();
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  T item() const { return value().item(); }
  bool requires_grad() const;
  const char* op() const;

  Var detach() const { return constant(value()); }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// grads[i] is the gradient for inputs[i]; entries whose needs[i] is false may be left undefined.
template <class T>
using BackwardFn = std::function<std::vector<Var<T>>(
    const Var<T>& out, const std::vector<Var<T>>& inputs, const Var<T>& grad,
    const std::vector<bool>& needs)>;

template <class T>
struct Node {
  Tensor<T> value;
  std::vector<Var<T>> inputs;
  BackwardFn<T> backward;
  bool requires_grad = false;
  const char* op = "leaf";
};

template <class T>
Var<T> Var<T>::leaf(Tensor<T> value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("non-finite value in leaf tensor");
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

template <class T>
const Tensor<T>& Var<T>::value() const {
  if (!node_) throw Error("use of undefined Var");
  return node_->value;
}

template <class T>
Tensor<T>& Var<T>::mutable_value() {
  if (!node_) throw Error("use of undefined Var");
  return node_->value;
}

template <class T>
bool Var<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <class T>
const char* Var<T>::op() const {
  return node_ ? node_->op : "undefined";
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = enabled;
  }
  ~GradModeGuard() { detail::grad_mode_flag() = previous_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

template <class T>
Var<T> make_op(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
               BackwardFn<T> backward) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->inputs.assign(inputs.begin(), inputs.end());
      node->backward = std::move(backward);
    }
  }
  return Var<T>(std::move(node));
}

// ---------------------------------------------------------------------------
// Broadcasting helpers (numpy rules, aligned on trailing axes)

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace detail {

/// Strides of `shape` viewed inside an output of rank `rank`; broadcast axes get stride 0.
inline std::vector<std::size_t> aligned_strides(const Shape& shape, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < shape.size(); ++k) {
    const std::size_t axis = shape.size() - 1 - k;
    const std::size_t oaxis = rank - 1 - k;
    strides[oaxis] = shape[axis] == 1 ? 0 : stride;
    stride *= shape[axis];
  }
  return strides;
}

/// Visits every element of `out` with the matching flat offsets into a and b.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = numel(out);
  if (out.empty()) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t rank = out.size();
  const std::size_t inner = out.back();
  const std::size_t ia = sa.back(), ib = sb.back();
  std::vector<std::size_t> counter(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, oa + j * ia, ob + j * ib);
    for (std::size_t axis = rank - 1; axis-- > 0;) {
      ++counter[axis];
      oa += sa[axis];
      ob += sb[axis];
      if (counter[axis] < out[axis]) break;
      oa -= sa[axis] * counter[axis];
      ob -= sb[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
}

template <class T, class F>
Tensor<T> broadcast_binary(const Tensor<T>& a, const Tensor<T>& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor<T> out(a.shape());
    const T* pa = a.raw();
    const T* pb = b.raw();
    T* po = out.raw();
    for (std::size_t i = 0, n = a.size(); i < n; ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  const Shape shape = broadcast_shapes(a.shape(), b.shape());
  Tensor<T> out(shape);
  const auto sa = aligned_strides(a.shape(), shape);
  const auto sb = aligned_strides(b.shape(), shape);
  const T* pa = a.raw();
  const T* pb = b.raw();
  T* po = out.raw();
  for_each_broadcast(shape, sa, sb,
                     [&](std::size_t o, std::size_t ia, std::size_t ib) { po[o] = f(pa[ia], pb[ib]); });
  return out;
}

template <class T, class F>
Tensor<T> map_unary(const Tensor<T>& x, F f) {
  Tensor<T> out(x.shape());
  const T* px = x.raw();
  T* po = out.raw();
  for (std::size_t i = 0, n = x.size(); i < n; ++i) po[i] = f(px[i]);
  return out;
}

template <class T>
Tensor<T> sum_to_kernel(const Tensor<T>& x, const Shape& target) {
  if (broadcast_shapes(target, x.shape()) != x.shape()) {
    throw ShapeError("cannot sum " + to_string(x.shape()) + " down to " + to_string(target));
  }
  Tensor<T> out(target, T(0));
  const auto sx = aligned_strides(x.shape(), x.shape());
  const auto st = aligned_strides(target, x.shape());
  const T* px = x.raw();
  T* po = out.raw();
  for_each_broadcast(x.shape(), sx, st,
                     [&](std::size_t, std::size_t ix, std::size_t it) { po[it] += px[ix]; });
  return out;
}

template <class T>
Tensor<T> broadcast_to_kernel(const Tensor<T>& x, const Shape& target) {
  if (broadcast_shapes(x.shape(), target) != target) {
    throw ShapeError("cannot broadcast " + to_string(x.shape()) + " to " + to_string(target));
  }
  Tensor<T> out(target);
  const auto sx = aligned_strides(x.shape(), target);
  const T* px = x.raw();
  T* po = out.raw();
  for_each_broadcast(target, sx, sx,
                     [&](std::size_t o, std::size_t ix, std::size_t) { po[o] = px[ix]; });
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shape-level ops

template <class T>
Var<T> sum_to(const Var<T>& x, const Shape& target);
template <class T>
Var<T> broadcast_to(const Var<T>& x, const Shape& target);

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (x.shape() == shape) return x;
  return make_op<T>("reshape", x.value().reshaped(std::move(shape)), {x},
                    [](const Var<T>&, const std::vector<Var<T>>& in, const Var<T>& g,
                       const std::vector<bool>&) -> std::vector<Var<T>> {
                      return {reshape(g, in[0].shape())};
                    });
}

template <class T>
Var<T> sum_to(const Var<T>& x, const Shape& target) {
  if (x.shape() == target) return x;
  return make_op<T>("sum_to", detail::sum_to_kernel(x.value(), target), {x},
                    [](const Var<T>&, const std::vector<Var<T>>& in, const Var<T>& g,
                       const std::vector<bool>&) -> std::vector<Var<T>> {
                      return {broadcast_to(g, in[0].shape())};
                    });
}

template <class T>
Var<T> broadcast_to(const Var<T>& x, const Shape& target) {
  if (x.shape() == target) return x;
  return make_op<T>("broadcast_to", detail::broadcast_to_kernel(x.value(), target), {x},
                    [](const Var<T>&, const std::vector<Var<T>>& in, const Var<T>& g,
                       const std::vector<bool>&) -> std::vector<Var<T>> {
                      return {sum_to(g, in[0].shape())};
                    });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  return reshape(sum_to(x, Shape(x.shape().size(), 1)), Shape{});
}

template <class T>
Var<T> mean(const Var<T>& x);

/// Sums the trailing axis, keeping it with extent 1.
template <class T>
Var<T> sum_last(const Var<T>& x) {
  Shape target = x.shape();
  if (target.empty()) return x;
  target.back() = 1;
  return sum_to(x, target);
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> operator/(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> operator-(const Var<T>& a);
template <class T>
Var<T> scale(const Var<T>& x, T c);

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return make_op<T>(
      "add", detail::broadcast_binary(a.value(), b.value(), [](T u, T v) { return u + v; }), {a, b},
      [](const Var<T>&, const std::vector<Var<T>>& in, const Var<T>& g,
         const std::vector<bool>& needs) -> std::vector<Var<T>> {
        std::vector<Var<T>> out(2);
        if (needs[0]) out[0] = sum_to(g, in[0].shape());
        if (needs[1]) out[1] = sum_to(g, in[1].shape());
        return out;
      });
}

template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return make_op<T>(
      "sub", detail::broadcast_binary(a.value(), b.value(), [](T u, T v) { return u - v; }), {a, b},
      [](const Var<T>&, const std::vector<Var<T>>& in, const Var<T>& g,
         const std::vector<bool>& needs) -> std::vector<Var<T>> {
        std::vector<Var<T>> out(2);
        if (needs[0]) out[0] = sum_to(g, in[0].shape());
        if (needs[1]) out[1] = sum_to(-g, in[1].shape());
        return out;
      });
}

template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return make_op<T>(
      "mul", detail::broadcast_binary(a.value(), b.value(), [](T u, T v) { return u * v; }), {a, b},
      [](const Var<T>&, const std::vector<Var<T>>& in, const Var<T>& g,
         const std::vector<bool>& needs) -> std::vector<Var<T>> {
        std::vector<Var<T>> out(2);
        if (needs[0]) out[0] = sum_to(g * in[1], in[0].shape());
        if (needs[1]) out[1] = sum_to(g * in[0], in[1].shape());
        return out;
      });
}

template <class T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) {
  return make_op<T>(
      "div", detail::broadcast_binary(a.value(), b.value(), [](T u, T v) { return u / v; }), {a, b},
      [](const Var<T>& out, const std::vector<Var<T>>& in, const Var<T>& g,
         const std::vector<bool>& needs) -> std::vector<Var<T>> {
        std::vector<Var<T>> res(2);
        if (needs[0]) res[0] = sum_to(g / in[1], in[0].shape());
        if (needs[1]) res[1] = sum_to(-((g * out) / in[1]), in[1].shape());
        return res;
      });
}

template <class T>
Var<T> operator-(const Var<T>& a) {
  return make_op<T>("neg", detail::map_unary(a.value(), [](T v) { return -v; }), {a},
                    [](const Var<T>&, const std::vector<Var<T>>&, const Var<T>& g,
                       const std::vector<bool>&) -> std::vector<Var<T>> { return {-g}; });
}

template <class T>
Var<T> scale(const Var<T>& x, T c) {
  return make_op<T>("scale", detail::map_unary(x.value(), [c](T v) { return v * c; }), {x},
                    [c](const Var<T>&, const std::vector<Var<T>>&, const Var<T>& g,
                        const std::vector<bool>&) -> std::vector<Var<T>> { return {scale(g, c)}; });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return make_op<T>("add_scalar", detail::map_unary(x.value(), [c](T v) { return v + c; }), {x},
                    [](const Var<T>&, const std::vector<Var<T>>&, const Var<T>& g,
                       const std::vector<bool>&) -> std::vector<Var<T>> { return {g}; });
}

template <class T>
Var<T> operator*(const Var<T>& x, T c) {
  return scale(x, c);
}
template <class T>
Var<T> operator*(T c, const Var<T>& x) {
  return scale(x, c);
}
template <class T>
Var<T> operator+(const Var<T>& x, T c) {
  return add_scalar(x, c);
}
template <class T>
Var<T> operator-(const Var<T>& x, T c) {
  return add_scalar(x, -c);
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <class T>
Var<T> exp(const Var<T>& x) {
  return make_op<T>("exp", detail::map_unary(x.value(), [](T v) { return std::exp(v); }), {x},
                    [](const Var<T>& out, const std::vector<Var<T>>&, const Var<T>& g,
                       const std::vector<bool>&) -> std::vector<Var<T>> { return {g * out}; });
}

template <class T>
Var<T> log(const Var<T>& x) {
  return make_op<T>("log", detail::map_unary(x.value(), [](T v) { return std::log(v); }), {x},
                    [](const Var<T>&, const std::vector<Var<T>>& in, const Var<T>& g,
                       const std::vector<bool>&) -> std::vector<Var<T>> { return {g / in[0]}; });
}

template <class T>
Var<T> sqrt(const Var<T>& x) {
  return make_op<T>("sqrt", detail::map_unary(x.value(), [](T v) { return std::sqrt(v); }), {x},
                    [](const Var<T>& out, const std::vector<Var<T>>&, const Var<T>& g,
                       const std::vector<bool>&) -> std::vector<Var<T>> {
                      return {scale(g, T(0.5)) / out};
                    });
}

template <class T>
Var<T> square(const Var<T>& x) {
  return make_op<T>("square", detail::map_unary(x.value(), [](T v) { return v * v; }), {x},
                    [](const Var<T>&, const std::vector<Var<T>>& in, const Var<T>& g,
                       const std::vector<bool>&) -> std::vector<Var<T>> {
                      return {g * scale(in[0], T(2))};
                    });
}

/// x^p for scalar p. Inputs must lie in the domain of std::pow.
template <class T>
Var<T> power(const Var<T>& x, T p) {
  if (p == T(1)) return x;
  return make_op<T>("power", detail::map_unary(x.value(), [p](T v) { return std::pow(v, p); }), {x},
                    [p](const Var<T>&, const std::vector<Var<T>>& in, const Var<T>& g,
                        const std::vector<bool>&) -> std::vector<Var<T>> {
                      return {g * scale(power(in[0], p - T(1)), p)};
                    });
}

namespace detail {
template <class T, class Pred>
Var<T> mask_of(const Tensor<T>& x, Pred pred) {
  return Var<T>::constant(map_unary(x, [&](T v) { return pred(v) ? T(1) : T(0); }));
}
}  // namespace detail

/// Subgradient at 0 is 0.
template <class T>
Var<T> relu(const Var<T>& x) {
  return make_op<T>("relu", detail::map_unary(x.value(), [](T v) { return v > T(0) ? v : T(0); }),
                    {x},
                    [](const Var<T>&, const std::vector<Var<T>>& in, const Var<T>& g,
                       const std::vector<bool>&) -> std::vector<Var<T>> {
                      return {g * detail::mask_of(in[0].value(), [](T v) { return v > T(0); })};
                    });
}

/// Rectified quadratic unit (max{0,x})^2; derivative 2 max{0,x} is continuous.
template <class T>
Var<T> requ(const Var<T>& x) {
  return square(relu(x));
}

template <class T>
Var<T> clamp_min(const Var<T>& x, T lo) {
  return make_op<T>("clamp_min", detail::map_unary(x.value(), [lo](T v) { return v > lo ? v : lo; }),
                    {x},
                    [lo](const Var<T>&, const std::vector<Var<T>>& in, const Var<T>& g,
                         const std::vector<bool>&) -> std::vector<Var<T>> {
                      return {g * detail::mask_of(in[0].value(), [lo](T v) { return v > lo; })};
                    });
}

/// Row-wise maximum over the trailing axis (kept with extent 1). Ties pick the lowest index.
template <class T>
Var<T> max_last(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() == 0) return x;
  const std::size_t inner = xv.shape().back();
  const std::size_t rows = xv.size() / inner;
  Shape out_shape = xv.shape();
  out_shape.back() = 1;
  Tensor<T> out(out_shape);
  Tensor<T> onehot(xv.shape(), T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.raw() + r * inner;
    std::size_t best = 0;
    for (std::size_t j = 1; j < inner; ++j)
      if (row[j] > row[best]) best = j;
    out[r] = row[best];
    onehot[r * inner + best] = T(1);
  }
  auto mask = Var<T>::constant(std::move(onehot));
  return make_op<T>("max_last", std::move(out), {x},
                    [mask](const Var<T>&, const std::vector<Var<T>>& in, const Var<T>& g,
                           const std::vector<bool>&) -> std::vector<Var<T>> {
                      return {broadcast_to(g, in[0].shape()) * mask};
                    });
}

/// log softmax over the trailing axis, computed with max subtraction.
template <class T>
Var<T> log_softmax(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("log_softmax needs rank >= 1");
  const std::size_t inner = xv.shape().back();
  const std::size_t rows = xv.size() / inner;
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.raw() + r * inner;
    T* orow = out.raw() + r * inner;
    T mx = row[0];
    for (std::size_t j = 1; j < inner; ++j) mx = std::max(mx, row[j]);
    T acc = 0;
    for (std::size_t j = 0; j < inner; ++j) acc += std::exp(row[j] - mx);
    const T lse = mx + std::log(acc);
    for (std::size_t j = 0; j < inner; ++j) orow[j] = row[j] - lse;
  }
  return make_op<T>("log_softmax", std::move(out), {x},
                    [](const Var<T>& out, const std::vector<Var<T>>&, const Var<T>& g,
                       const std::vector<bool>&) -> std::vector<Var<T>> {
                      return {g - exp(out) * sum_last(g)};
                    });
}

template <class T>
Var<T> softmax(const Var<T>& x) {
  return exp(log_softmax(x));
}

// ---------------------------------------------------------------------------
// Matrix multiply

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C (+)= op(A) op(B) for row-major blocks.
template <class T>
void gemm(const T* a, std::size_t ar, std::size_t ac, bool ta, const T* b, std::size_t br,
          std::size_t bc, bool tb, T* c, bool accumulate) {
  Eigen::Map<const RowMat<T>> A(a, Eigen::Index(ar), Eigen::Index(ac));
  Eigen::Map<const RowMat<T>> B(b, Eigen::Index(br), Eigen::Index(bc));
  const Eigen::Index m = ta ? Eigen::Index(ac) : Eigen::Index(ar);
  const Eigen::Index n = tb ? Eigen::Index(br) : Eigen::Index(bc);
  Eigen::Map<RowMat<T>> C(c, m, n);
  if (accumulate) {
    if (!ta && !tb) C.noalias() += A * B;
    if (ta && !tb) C.noalias() += A.transpose() * B;
    if (!ta && tb) C.noalias() += A * B.transpose();
    if (ta && tb) C.noalias() += A.transpose() * B.transpose();
  } else {
    if (!ta && !tb) C.noalias() = A * B;
    if (ta && !tb) C.noalias() = A.transpose() * B;
    if (!ta && tb) C.noalias() = A * B.transpose();
    if (ta && tb) C.noalias() = A.transpose() * B.transpose();
  }
}

struct MatmulDims {
  std::size_t batch = 0;  // 0 when neither operand is batched
  bool a_batched = false, b_batched = false;
  std::size_t ar = 0, ac = 0, br = 0, bc = 0, m = 0, k = 0, n = 0;
};

template <class T>
MatmulDims matmul_dims(const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb) {
  if ((a.rank() != 2 && a.rank() != 3) || (b.rank() != 2 && b.rank() != 3)) {
    throw ShapeError("matmul operands must have rank 2 or 3, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  MatmulDims d;
  d.a_batched = a.rank() == 3;
  d.b_batched = b.rank() == 3;
  d.ar = a.shape()[a.rank() - 2];
  d.ac = a.shape()[a.rank() - 1];
  d.br = b.shape()[b.rank() - 2];
  d.bc = b.shape()[b.rank() - 1];
  d.m = ta ? d.ac : d.ar;
  d.k = ta ? d.ar : d.ac;
  const std::size_t kb = tb ? d.bc : d.br;
  d.n = tb ? d.br : d.bc;
  if (d.k != kb) {
    throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  if (d.a_batched && d.b_batched && a.shape()[0] != b.shape()[0]) {
    throw ShapeError("matmul batch sizes differ: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  d.batch = d.a_batched ? a.shape()[0] : (d.b_batched ? b.shape()[0] : 0);
  return d;
}

}  // namespace detail

/// op(a) · op(b) where op transposes the trailing two axes when requested.
/// Rank-3 operands are batched along axis 0; a rank-2 operand is shared across
/// the batch. With sum_batch the batched products are summed into one matrix.
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta = false, bool tb = false,
              bool sum_batch = false) {
  const auto d = detail::matmul_dims(a.value(), b.value(), ta, tb);
  const bool batched_out = d.batch > 0 && !sum_batch;
  Tensor<T> out(batched_out ? Shape{d.batch, d.m, d.n} : Shape{d.m, d.n}, T(0));
  const std::size_t nb = std::max<std::size_t>(d.batch, 1);
  const std::size_t sa = d.a_batched ? d.ar * d.ac : 0;
  const std::size_t sb = d.b_batched ? d.br * d.bc : 0;
  const std::size_t so = batched_out ? d.m * d.n : 0;
  for (std::size_t i = 0; i < nb; ++i) {
    detail::gemm(a.value().raw() + i * sa, d.ar, d.ac, ta, b.value().raw() + i * sb, d.br, d.bc, tb,
                 out.raw() + i * so, !batched_out && i > 0);
  }
  return make_op<T>(
      "matmul", std::move(out), {a, b},
      [ta, tb](const Var<T>&, const std::vector<Var<T>>& in, const Var<T>& g,
               const std::vector<bool>& needs) -> std::vector<Var<T>> {
        // Produces a gradient matching `target`'s batching from op(p)·op(q).
        auto fit = [](const Var<T>& target, const Var<T>& p, const Var<T>& q, bool tp, bool tq) {
          const bool target_batched = target.shape().size() == 3;
          const bool operand_batched = p.shape().size() == 3 || q.shape().size() == 3;
          Var<T> r = matmul(p, q, tp, tq, !target_batched && operand_batched);
          if (target_batched && r.shape().size() == 2) r = broadcast_to(r, target.shape());
          return r;
        };
        std::vector<Var<T>> res(2);
        const Var<T>& A = in[0];
        const Var<T>& B = in[1];
        if (needs[0]) res[0] = ta ? fit(A, B, g, tb, true) : fit(A, g, B, false, !tb);
        if (needs[1]) res[1] = tb ? fit(B, g, A, true, ta) : fit(B, A, g, !ta, false);
        return res;
      });
}

// ---------------------------------------------------------------------------
// Convolution lowering

struct ConvGeom {
  std::size_t channels = 1, height = 1, width = 1;
  std::size_t kernel = 1, stride = 1, pad = 0;

  std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t positions() const { return out_height() * out_width(); }
};

namespace detail {

template <class T, bool Scatter>
void im2col_loop(const ConvGeom& gm, std::size_t batch, const T* x, T* cols) {
  const std::size_t ho = gm.out_height(), wo = gm.out_width();
  const std::size_t plane = gm.height * gm.width;
  const std::size_t img = gm.channels * plane;
  const std::size_t colsz = gm.patch() * ho * wo;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < gm.channels; ++c) {
      for (std::size_t ki = 0; ki < gm.kernel; ++ki) {
        for (std::size_t kj = 0; kj < gm.kernel; ++kj) {
          const std::size_t row = (c * gm.kernel + ki) * gm.kernel + kj;
          T* crow = cols + n * colsz + row * ho * wo;
          const T* xplane = x + n * img + c * plane;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = std::ptrdiff_t(oy * gm.stride + ki) - std::ptrdiff_t(gm.pad);
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = std::ptrdiff_t(ox * gm.stride + kj) - std::ptrdiff_t(gm.pad);
              const bool inside = iy >= 0 && ix >= 0 && iy < std::ptrdiff_t(gm.height) &&
                                  ix < std::ptrdiff_t(gm.width);
              if constexpr (Scatter) {
                if (inside) const_cast<T*>(xplane)[iy * gm.width + ix] += crow[oy * wo + ox];
              } else {
                crow[oy * wo + ox] = inside ? xplane[iy * gm.width + ix] : T(0);
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

template <class T>
Var<T> col2im(const Var<T>& cols, const ConvGeom& gm);

/// [N,C,H,W] -> [N, C*k*k, Ho*Wo] patch matrix with zero padding.
template <class T>
Var<T> im2col(const Var<T>& x, const ConvGeom& gm) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != gm.channels || s[2] != gm.height || s[3] != gm.width) {
    throw ShapeError("im2col input " + to_string(s) + " does not match geometry");
  }
  Tensor<T> cols(Shape{s[0], gm.patch(), gm.positions()});
  detail::im2col_loop<T, false>(gm, s[0], x.value().raw(), cols.raw());
  return make_op<T>("im2col", std::move(cols), {x},
                    [gm](const Var<T>&, const std::vector<Var<T>>&, const Var<T>& g,
                         const std::vector<bool>&) -> std::vector<Var<T>> { return {col2im(g, gm)}; });
}

/// Adjoint of im2col: scatter-adds patches back into an image batch.
template <class T>
Var<T> col2im(const Var<T>& cols, const ConvGeom& gm) {
  const Shape& s = cols.shape();
  if (s.size() != 3 || s[1] != gm.patch() || s[2] != gm.positions()) {
    throw ShapeError("col2im input " + to_string(s) + " does not match geometry");
  }
  Tensor<T> x(Shape{s[0], gm.channels, gm.height, gm.width}, T(0));
  detail::im2col_loop<T, true>(gm, s[0], x.raw(), const_cast<T*>(cols.value().raw()));
  return make_op<T>("col2im", std::move(x), {cols},
                    [gm](const Var<T>&, const std::vector<Var<T>>&, const Var<T>& g,
                         const std::vector<bool>&) -> std::vector<Var<T>> { return {im2col(g, gm)}; });
}

// ---------------------------------------------------------------------------
// Gradient engine

/// Gradients of a scalar `output` with respect to each tensor in `wrt`.
///
/// With retain=true the returned tensors are graph nodes and may be passed to
/// grad() again. A wrt tensor that does not influence `output` is an error
/// unless allow_unused is set, in which case a zero tensor is returned.
template <class T>
std::vector<Var<T>> grad(const Var<T>& output, const std::vector<Var<T>>& wrt, bool retain = false,
                         bool allow_unused = false) {
  if (!output.defined() || output.size() != 1) {
    throw ShapeError("grad requires a scalar output");
  }
  std::unordered_set<const Node<T>*> targets;
  for (const auto& w : wrt) {
    if (!w.requires_grad()) throw Error("grad: a wrt tensor does not require grad");
    targets.insert(w.node());
  }

  // Post-order DFS over the recorded graph; reversed, it is a topological order.
  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_map<const Node<T>*, bool> needed;
  if (output.requires_grad()) {
    std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack{{output.ptr(), 0}};
    std::unordered_set<const Node<T>*> visited{output.node()};
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        const auto& child = node->inputs[next++].ptr();
        if (child->requires_grad && visited.insert(child.get()).second) stack.push_back({child, 0});
        continue;
      }
      bool need = targets.count(node.get()) > 0;
      for (const auto& in : node->inputs) {
        auto it = needed.find(in.node());
        need = need || (it != needed.end() && it->second);
      }
      needed[node.get()] = need;
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<const Node<T>*, Var<T>> grads;
  grads[output.node()] = Var<T>::constant(Tensor<T>(output.shape(), T(1)));

  GradModeGuard mode(retain);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = it->get();
    if (!needed[node] || node->inputs.empty()) continue;
    auto git = grads.find(node);
    if (git == grads.end()) continue;
    std::vector<bool> needs(node->inputs.size());
    for (std::size_t i = 0; i < needs.size(); ++i) {
      auto nit = needed.find(node->inputs[i].node());
      needs[i] = nit != needed.end() && nit->second;
    }
    Var<T> g = git->second;
    if (!targets.count(node)) grads.erase(git);
    const Var<T> out_var(*it);
    auto in_grads = node->backward(out_var, node->inputs, g, needs);
    for (std::size_t i = 0; i < needs.size(); ++i) {
      if (!needs[i] || !in_grads[i].defined()) continue;
      const Node<T>* child = node->inputs[i].node();
      if (in_grads[i].shape() != child->value.shape()) {
        throw ShapeError(std::string("internal: gradient shape mismatch in ") + node->op);
      }
      auto cit = grads.find(child);
      if (cit == grads.end()) {
        grads.emplace(child, std::move(in_grads[i]));
      } else {
        cit->second = cit->second + in_grads[i];
      }
    }
  }

  std::vector<Var<T>> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = grads.find(w.node());
    if (it == grads.end()) {
      if (!allow_unused) throw Error("grad: a wrt tensor is not part of the output's graph");
      result.push_back(Var<T>::constant(Tensor<T>(w.shape(), T(0))));
    } else {
      result.push_back(it->second);
    }
  }
  return result;
}

}  // namespace droaug
