// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "droaug/autodiff.hpp"
#include "droaug/errors.hpp"

namespace droaug {

/// Cosine annealing from lr_init at step 0 to lr_min at step == total.
inline double cosine_lr(std::size_t step, std::size_t total, double lr_init, double lr_min) {
  if (total == 0) return lr_init;
  if (step >= total) return lr_min;
  const double t = double(step) / double(total);
  return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 5e-4;

  void validate() const {
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0,1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  }
};

/// SGD with Nesterov momentum and coupled weight decay:
///   g = grad + wd * p;  v = mu * v + g;  p -= lr * (g + mu * v).
template <class T>
class SgdNesterov {
 public:
  explicit SgdNesterov(SgdConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  void step(std::vector<Var<T>>& params, const std::vector<Var<T>>& grads, double lr) {
    if (params.size() != grads.size()) throw ShapeError("optimizer: params and grads differ in count");
    if (velocity_.empty()) {
      for (const auto& p : params) velocity_.emplace_back(p.shape(), T(0));
    }
    if (velocity_.size() != params.size()) throw ShapeError("optimizer: parameter set changed");
    const T mu = T(cfg_.momentum), wd = T(cfg_.weight_decay), eta = T(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = params[i].mutable_value();
      const Tensor<T>& g = grads[i].value();
      Tensor<T>& v = velocity_[i];
      if (g.shape() != p.shape()) throw ShapeError("optimizer: gradient shape mismatch");
      for (std::size_t k = 0; k < p.size(); ++k) {
        const T gk = g[k] + wd * p[k];
        v[k] = mu * v[k] + gk;
        p[k] -= eta * (gk + mu * v[k]);
      }
    }
  }

  const std::vector<Tensor<T>>& velocity() const { return velocity_; }

 private:
  SgdConfig cfg_;
  std::vector<Tensor<T>> velocity_;
};

}  // namespace droaug
