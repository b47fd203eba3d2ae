// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training loop: augment each mini-batch, then minimize the variation-regularized
// cross entropy (plus the augmentation's consistency term) with Nesterov SGD
// under a per-step cosine learning-rate schedule.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "droaug/augment.hpp"
#include "droaug/autodiff.hpp"
#include "droaug/data.hpp"
#include "droaug/errors.hpp"
#include "droaug/models.hpp"
#include "droaug/optim.hpp"
#include "droaug/report.hpp"
#include "droaug/rng.hpp"
#include "droaug/robust.hpp"

namespace droaug {

enum class AugmentKind { none, mixup, augmix, noisymix };

inline std::string to_string(AugmentKind k) {
  switch (k) {
    case AugmentKind::none: return "none";
    case AugmentKind::mixup: return "mixup";
    case AugmentKind::augmix: return "augmix";
    case AugmentKind::noisymix: return "noisymix";
  }
  return "?";
}

inline AugmentKind augment_from_string(const std::string& s) {
  for (auto k : {AugmentKind::none, AugmentKind::mixup, AugmentKind::augmix, AugmentKind::noisymix})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown augmentation '" + s + "' (expected none, mixup, augmix or noisymix)");
}

struct TrainConfig {
  std::string model = "cnn-small";
  std::size_t epochs = 10;
  std::size_t batch_size = 128;
  std::size_t eval_batch_size = 1000;
  double lr_init = 0.1;
  double lr_min = 1e-5;
  SgdConfig sgd;
  AugmentKind augment = AugmentKind::mixup;
  MixupConfig mixup;
  AugmixConfig augmix;
  NoisymixConfig noisymix;
  RobustLossConfig robust;
  std::uint64_t seed = 0;
  bool eval_each_epoch = true;

  bool mixes() const { return augment == AugmentKind::mixup || augment == AugmentKind::noisymix; }

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (batch_size < 2 && mixes()) throw ConfigError("mixing augmentations need batch_size >= 2");
    if (eval_batch_size == 0) throw ConfigError("eval_batch_size must be >= 1");
    if (!(lr_init > 0) || !(lr_min >= 0) || lr_min > lr_init) {
      throw ConfigError("learning rates must satisfy 0 <= lr_min <= lr_init, lr_init > 0");
    }
    sgd.validate();
    mixup.validate();
    augmix.validate();
    noisymix.validate();
    robust.validate();
  }
};

/// What the trainer saw on one mini-batch, reported before the parameter update.
template <class T>
struct BatchEvent {
  std::size_t epoch;
  std::size_t batch;
  std::size_t step;
  double lr;
  const Batch<T>& raw;
  const Batch<T>& augmented;  // batch the cross entropy and penalty were computed on
  const Model<T>& model;      // parameters before this step's update
  double loss;
  std::optional<double> penalty;
};

template <class T>
struct TrainHooks {
  std::function<void(const BatchEvent<T>&)> on_batch;
  std::function<void(const EpochMetrics&)> on_epoch;
};

template <class T>
struct TrainResult {
  Model<T> model;
  MetricsReport report;
};

namespace detail {
/// A trailing batch of one sample is dropped when the augmentation pairs samples.
inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch, bool pairs) {
  const std::size_t rest = n % batch;
  return n / batch + (rest >= (pairs ? 2u : 1u) ? 1 : 0);
}
}  // namespace detail

template <class T>
TrainResult<T> train(const TrainConfig& cfg, const Dataset& train_set, const Dataset* test_set = nullptr,
                     const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  if (train_set.size() < (cfg.mixes() ? 2u : 1u)) throw ConfigError("training set is too small");
  Model<T> model = build_model<T>(cfg.model, cfg.seed);
  if (model.input_shape() != train_set.sample_shape()) {
    throw ShapeError("model input " + to_string(model.input_shape()) + " does not match data " +
                     to_string(train_set.sample_shape()));
  }
  if (model.num_classes() != train_set.num_classes) {
    throw ShapeError("model class count does not match the dataset");
  }

  std::vector<Var<T>> params = model.parameter_vars();
  SgdNesterov<T> opt(cfg.sgd);
  const std::size_t per_epoch = detail::steps_per_epoch(train_set.size(), cfg.batch_size, cfg.mixes());
  const std::size_t total_steps = per_epoch * cfg.epochs;
  const bool penalized = cfg.robust.rho > 0;
  const T rho = T(cfg.robust.rho);
  std::size_t step = 0;
  TrainResult<T> result;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng = substream(cfg.seed, {1, epoch});
    const auto order = permutation(shuffle_rng, train_set.size());
    double loss_sum = 0, pen_sum = 0;
    for (std::size_t bi = 0; bi < per_epoch; ++bi) {
      const std::size_t begin = bi * cfg.batch_size;
      const std::size_t count = std::min(cfg.batch_size, train_set.size() - begin);
      const Batch<T> raw =
          make_batch<T>(train_set, std::span<const std::size_t>(order.data() + begin, count));
      Rng aug_rng = substream(cfg.seed, {2, epoch, bi});
      const double lr = cosine_lr(step, total_steps, cfg.lr_init, cfg.lr_min);

      Batch<T> primary = raw;
      std::optional<Batch<T>> extra;  // second AugMix view, or mixed clean batch for NoisyMix
      switch (cfg.augment) {
        case AugmentKind::none: break;
        case AugmentKind::mixup: primary = mixup(raw, cfg.mixup, aug_rng); break;
        case AugmentKind::augmix:
          primary.images = augmix_batch(raw.images, cfg.augmix, cfg.seed, {3, epoch, bi, 1});
          extra = Batch<T>{augmix_batch(raw.images, cfg.augmix, cfg.seed, {3, epoch, bi, 2}), raw.labels};
          break;
        case AugmentKind::noisymix: {
          auto nm = noisymix(raw, cfg.noisymix, aug_rng);
          primary = std::move(nm.noisy);
          extra = std::move(nm.clean);
          break;
        }
      }

      Var<T> total, penalty;
      try {
        if (penalized) {
          const auto ig = per_sample_input_gradients(model, primary);
          penalty = penalty_from_gradients(ig.grads, cfg.robust);
          total = mean(ig.losses) + scale(penalty, rho);
        } else {
          total = cross_entropy(model.forward(Var<T>::constant(primary.images)),
                                Var<T>::constant(primary.labels));
        }
        if (cfg.augment == AugmentKind::augmix && cfg.augmix.jsd_weight > 0) {
          const Var<T> pc = softmax(model.forward(Var<T>::constant(raw.images)));
          const Var<T> p1 = softmax(model.forward(Var<T>::constant(primary.images)));
          const Var<T> p2 = softmax(model.forward(Var<T>::constant(extra->images)));
          total = total + scale(jsd_loss(pc, p1, p2), T(cfg.augmix.jsd_weight));
        }
        if (cfg.augment == AugmentKind::noisymix && cfg.noisymix.stability_weight > 0) {
          const Var<T> clean_logits = model.forward(Var<T>::constant(extra->images));
          const Var<T> noisy_logits = model.forward(Var<T>::constant(primary.images));
          total = total + scale(stability_kl(clean_logits, noisy_logits), T(cfg.noisymix.stability_weight));
        }
        const double loss_value = double(total.item());
        std::optional<double> pen_value;
        if (penalized) pen_value = double(penalty.item());
        if (hooks.on_batch) {
          hooks.on_batch(BatchEvent<T>{epoch, bi, step, lr, raw, primary, model, loss_value, pen_value});
        }
        const auto grads = grad(total, params);
        for (const auto& g : grads)
          if (!g.value().all_finite()) throw NumericError("non-finite parameter gradient");
        opt.step(params, grads, lr);
        loss_sum += loss_value;
        if (pen_value) pen_sum += *pen_value;
      } catch (const NumericError& e) {
        std::string msg = std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                          std::to_string(bi);
        if (penalty.defined()) msg += ", penalty " + std::to_string(double(penalty.item()));
        throw NumericError(msg + ")");
      }
      ++step;
    }
    EpochMetrics em;
    em.epoch = epoch + 1;
    em.train_loss = loss_sum / double(per_epoch);
    if (penalized) em.penalty = pen_sum / double(per_epoch);
    if (test_set && cfg.eval_each_epoch) em.test_accuracy = accuracy(model, *test_set, cfg.eval_batch_size);
    em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.report.epochs.push_back(em);
    if (hooks.on_epoch) hooks.on_epoch(em);
  }
  if (test_set) result.report.clean_accuracy = accuracy(model, *test_set, cfg.eval_batch_size);
  result.model = std::move(model);
  return result;
}

}  // namespace droaug
