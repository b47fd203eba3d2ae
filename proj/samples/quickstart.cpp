// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0

// Trains a small CNN on the bundled digit subset with Mixup and the
// variation-regularized loss, then reports clean and PGD accuracy.

#include <cstdio>

#include "droaug/droaug.hpp"

int main() {
  using namespace droaug;
  const std::string dir = std::string(DROAUG_SAMPLE_DATA_DIR) + "/mnist-subset/";
  const Dataset train_set =
      load_idx(dir + "train-images-idx3-ubyte.gz", dir + "train-labels-idx1-ubyte.gz").slice(0, 4000);
  const Dataset test_set = load_idx(dir + "t5k-images-idx3-ubyte.gz", dir + "t5k-labels-idx1-ubyte.gz").slice(0, 1000);

  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.augment = AugmentKind::mixup;
  cfg.robust.rho = 0.05;
  TrainHooks<float> hooks;
  hooks.on_epoch = [](const EpochMetrics& e) {
    std::printf("epoch %zu  loss %.4f  penalty %.4f  test %.4f  (%.1fs)\n", e.epoch, e.train_loss,
                e.penalty.value_or(0), e.test_accuracy.value_or(0), e.seconds);
  };
  const auto result = train<float>(cfg, train_set, &test_set, hooks);

  AttackConfig attack;
  attack.eps = 8.0 / 255;
  std::printf("clean %.4f  pgd(eps=8/255) %.4f\n", *result.report.clean_accuracy,
              robust_accuracy(result.model, test_set, attack));
}
