// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// L-infinity projected gradient descent (PGD) attack and robust accuracy.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "droaug/autodiff.hpp"
#include "droaug/data.hpp"
#include "droaug/errors.hpp"
#include "droaug/models.hpp"
#include "droaug/rng.hpp"

namespace droaug {

struct AttackConfig {
  double eps = 8.0 / 255.0;
  std::size_t steps = 20;
  double step_size = 0;  // 0 selects eps / 8
  bool random_start = false;
  std::uint64_t seed = 0;

  double effective_step() const { return step_size > 0 ? step_size : eps / 8; }

  void validate() const {
    if (!(eps >= 0) || !std::isfinite(eps)) throw ConfigError("attack eps must be >= 0");
    if (!(step_size >= 0)) throw ConfigError("attack step_size must be >= 0");
  }
};

/// Called after each iteration with the current adversarial images.
template <class T>
using AttackHook = std::function<void(std::size_t iteration, const Tensor<T>& adv)>;

/// Maximizes hard-label cross entropy over ||x' - x||_inf <= eps with x' in [0,1].
/// Soft label rows are reduced to their argmax.
template <class T>
Batch<T> pgd_attack(const Model<T>& model, const Batch<T>& b, const AttackConfig& cfg,
                    const AttackHook<T>& hook = {}) {
  cfg.validate();
  if (cfg.eps == 0 || cfg.steps == 0) return b;
  const auto hard = argmax_rows(b.labels);
  const Var<T> labels = Var<T>::constant(one_hot<T>(hard, b.num_classes()));
  const T eps = T(cfg.eps);
  const T step = T(cfg.effective_step());
  const Tensor<T>& x0 = b.images;
  auto project = [&](Tensor<T>& x) {
    for (std::size_t k = 0; k < x.size(); ++k) {
      const T lo = std::max(T(0), x0[k] - eps);
      const T hi = std::min(T(1), x0[k] + eps);
      x[k] = std::clamp(x[k], lo, hi);
    }
  };
  Tensor<T> adv = x0;
  if (cfg.random_start) {
    Rng rng = substream(cfg.seed, {0x9d});
    for (auto& v : adv.data()) v += T(uniform(rng, -cfg.eps, cfg.eps));
    project(adv);
  }
  for (std::size_t it = 0; it < cfg.steps; ++it) {
    const Var<T> x = Var<T>::leaf(adv, true);
    const Var<T> loss = sum(per_sample_cross_entropy(model.forward(x), labels));
    const Tensor<T> g = grad(loss, {x})[0].value();
    if (!g.all_finite()) throw NumericError("PGD: non-finite input gradient at iteration " + std::to_string(it));
    for (std::size_t k = 0; k < adv.size(); ++k) adv[k] += step * T((g[k] > 0) - (g[k] < 0));
    project(adv);
    if (hook) hook(it, adv);
  }
  return {std::move(adv), b.labels};
}

/// Accuracy on PGD-perturbed versions of `data`, attacked in chunks.
template <class T>
double robust_accuracy(const Model<T>& model, const Dataset& data, const AttackConfig& cfg,
                       std::size_t chunk = 1000) {
  std::size_t correct = 0;
  for (std::size_t b = 0; b < data.size(); b += chunk) {
    const std::size_t cnt = std::min(chunk, data.size() - b);
    const Batch<T> batch = make_batch<T>(data, b, cnt);
    const Batch<T> adv = pgd_attack(model, batch, cfg);
    const auto pred = predict(model, adv.images, chunk);
    for (std::size_t i = 0; i < cnt; ++i) correct += pred[i] == data.labels[b + i];
  }
  return double(correct) / double(data.size());
}

}  // namespace droaug
