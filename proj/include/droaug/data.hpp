// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "droaug/errors.hpp"
#include "droaug/tensor.hpp"

namespace droaug {

/// Labelled image collection with pixels in [0,1], stored [N,C,H,W].
struct Dataset {
  Tensor<float> images{Shape{1, 1, 1, 1}};
  std::vector<int> labels;
  std::size_t num_classes = 10;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return images.size() / std::max<std::size_t>(labels.size(), 1); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

  std::span<const float> image(std::size_t i) const {
    return images.data().subspan(i * sample_size(), sample_size());
  }
  std::span<float> image(std::size_t i) { return images.data().subspan(i * sample_size(), sample_size()); }

  /// Copy of `count` consecutive samples starting at `begin`.
  Dataset slice(std::size_t begin, std::size_t count) const {
    if (begin + count > size() || count == 0) throw ShapeError("dataset slice out of range");
    Dataset out;
    Shape shape = images.shape();
    shape[0] = count;
    const auto src = images.data().subspan(begin * sample_size(), count * sample_size());
    out.images = Tensor<float>(shape, std::vector<float>(src.begin(), src.end()));
    out.labels.assign(labels.begin() + std::ptrdiff_t(begin),
                      labels.begin() + std::ptrdiff_t(begin + count));
    out.num_classes = num_classes;
    return out;
  }
};

/// N images plus per-row label distributions (one-hot for raw data, soft after mixing).
template <class T>
struct Batch {
  Tensor<T> images;  // [N,C,H,W]
  Tensor<T> labels;  // [N,K]

  std::size_t size() const { return images.dim(0); }
  std::size_t num_classes() const { return labels.dim(1); }
};

template <class T>
Tensor<T> one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor<T> out(Shape{labels.size(), classes}, T(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || std::size_t(labels[i]) >= classes) throw FormatError("label out of range");
    out[i * classes + std::size_t(labels[i])] = T(1);
  }
  return out;
}

template <class T>
Batch<T> make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  const std::size_t per = data.sample_size();
  Shape shape = data.images.shape();
  shape[0] = indices.size();
  Tensor<T> images(shape);
  std::vector<int> labels(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = data.image(indices[i]);
    std::copy(src.begin(), src.end(), images.raw() + i * per);
    labels[i] = data.labels[indices[i]];
  }
  return {std::move(images), one_hot<T>(labels, data.num_classes)};
}

template <class T>
Batch<T> make_batch(const Dataset& data, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
  return make_batch<T>(data, idx);
}

/// Throws unless pixels lie in [0,1] and each label row is a distribution (sum within tol of 1).
template <class T>
void validate_batch(const Batch<T>& b, double tol = 1e-6) {
  if (b.images.rank() != 4 || b.labels.rank() != 2 || b.images.dim(0) != b.labels.dim(0)) {
    throw ShapeError("batch must pair [N,C,H,W] images with [N,K] labels");
  }
  for (T v : b.images.data()) {
    if (!(v >= T(0) && v <= T(1))) throw ShapeError("batch pixel outside [0,1]");
  }
  const std::size_t k = b.labels.dim(1);
  for (std::size_t i = 0; i < b.size(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const T v = b.labels[i * k + j];
      if (v < T(0)) throw ShapeError("negative label weight");
      s += double(v);
    }
    if (std::abs(s - 1.0) > tol) throw ShapeError("label row does not sum to 1");
  }
}

/// Index of the largest entry in each row; ties resolve to the lowest index.
template <class T>
std::vector<int> argmax_rows(const Tensor<T>& m) {
  const std::size_t k = m.shape().back();
  const std::size_t rows = m.size() / k;
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (m[r * k + j] > m[r * k + best]) best = j;
    out[r] = int(best);
  }
  return out;
}

}  // namespace droaug
