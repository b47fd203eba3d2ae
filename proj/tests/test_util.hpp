// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "droaug/droaug.hpp"

namespace droaug::testing {

inline std::string data_path(const std::string& name) {
  return std::string(DROAUG_TEST_DATA_DIR) + "/mnist-subset/" + name;
}

inline const Dataset& mnist_train() {
  static const Dataset d =
      load_idx(data_path("train-images-idx3-ubyte.gz"), data_path("train-labels-idx1-ubyte.gz"));
  return d;
}

inline const Dataset& mnist_test() {
  static const Dataset d =
      load_idx(data_path("t5k-images-idx3-ubyte.gz"), data_path("t5k-labels-idx1-ubyte.gz"));
  return d;
}

template <class T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -2, double hi = 2) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = T(uniform(rng, lo, hi));
  return t;
}

/// Random batch with pixels in [0,1] and one-hot labels.
template <class T>
Batch<T> random_batch(std::size_t n, const Shape& sample, std::size_t classes, Rng& rng) {
  Shape s{n};
  s.insert(s.end(), sample.begin(), sample.end());
  std::vector<int> labels(n);
  for (auto& l : labels) l = int(std::uniform_int_distribution<std::size_t>(0, classes - 1)(rng));
  return {random_tensor<T>(s, rng, 0, 1), one_hot<T>(labels, classes)};
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("droaug_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Compares parameter gradients of `loss` with central differences along random
/// directions and random single coordinates. Returns the worst relative error,
/// |analytic - numeric| / max(floor, |numeric|).
inline double param_gradcheck(Model<double>& model, const std::function<Var<double>()>& loss, Rng& rng,
                              std::size_t directions, std::size_t coordinates, double h = 1e-5,
                              double floor = 1e-6) {
  auto params = model.parameter_vars();
  const auto grads = grad(loss(), params);
  auto eval = [&]() { return loss().item(); };
  double worst = 0;
  auto check = [&](const std::vector<Tensor<double>>& dir) {
    double analytic = 0;
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t k = 0; k < dir[i].size(); ++k) analytic += grads[i].value()[k] * dir[i][k];
    auto shift = [&](double s) {
      for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t k = 0; k < dir[i].size(); ++k) params[i].mutable_value()[k] += s * dir[i][k];
    };
    shift(h);
    const double fp = eval();
    shift(-2 * h);
    const double fm = eval();
    shift(h);
    const double numeric = (fp - fm) / (2 * h);
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(floor, std::abs(numeric)));
  };
  for (std::size_t d = 0; d < directions; ++d) {
    std::vector<Tensor<double>> dir;
    double n2 = 0;
    for (const auto& p : params) {
      dir.push_back(random_tensor<double>(p.shape(), rng, -1, 1));
      for (double v : dir.back().data()) n2 += v * v;
    }
    for (auto& t : dir)
      for (auto& v : t.data()) v /= std::sqrt(n2);
    check(dir);
  }
  for (std::size_t c = 0; c < coordinates; ++c) {
    std::vector<Tensor<double>> dir;
    for (const auto& p : params) dir.emplace_back(p.shape(), 0.0);
    const std::size_t which = std::uniform_int_distribution<std::size_t>(0, params.size() - 1)(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(0, dir[which].size() - 1)(rng);
    dir[which][k] = 1;
    check(dir);
  }
  return worst;
}

}  // namespace droaug::testing
