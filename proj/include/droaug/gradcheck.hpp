// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>

#include "droaug/autodiff.hpp"

namespace droaug {

/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every coordinate of `point`.
template <class T>
Tensor<T> finite_difference_gradient(const std::function<T(const Tensor<T>&)>& fn,
                                     const Tensor<T>& point, T step) {
  if (!(step > T(0))) throw ConfigError("finite difference step must be positive");
  Tensor<T> probe = point;
  Tensor<T> out(point.shape());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + step;
    const T up = fn(probe);
    probe[i] = orig - step;
    const T down = fn(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite difference: non-finite function value");
    }
    out[i] = (up - down) / (T(2) * step);
  }
  return out;
}

/// max_i |a_i - b_i| / max(scale_floor, max_i |b_i|).
template <class T>
T relative_error(const Tensor<T>& a, const Tensor<T>& b, T scale_floor = T(1e-8)) {
  if (a.shape() != b.shape()) throw ShapeError("relative_error: shape mismatch");
  T diff = 0, mag = scale_floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    mag = std::max(mag, std::abs(b[i]));
  }
  return diff / mag;
}

}  // namespace droaug
