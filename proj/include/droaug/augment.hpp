// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Data augmentation: Mixup, AugMix (with its Jensen-Shannon consistency loss)
// and NoisyMix at the input level.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "droaug/autodiff.hpp"
#include "droaug/data.hpp"
#include "droaug/errors.hpp"
#include "droaug/rng.hpp"

namespace droaug {

// ---------------------------------------------------------------------------
// Mixup

struct MixupConfig {
  double alpha = 1.0;

  void validate() const {
    if (!(alpha > 0) || !std::isfinite(alpha)) throw ConfigError("mixup alpha must be > 0");
  }
};

/// Convex combination of each sample with sample perm[i] using one weight lambda.
/// Rows paired with themselves are returned untouched.
template <class T>
Batch<T> mixup_with(const Batch<T>& b, double lambda, const std::vector<std::size_t>& perm) {
  const std::size_t n = b.size();
  if (perm.size() != n) throw ShapeError("mixup permutation length differs from batch size");
  if (!(lambda >= 0 && lambda <= 1)) throw ConfigError("mixup lambda must lie in [0,1]");
  const T lam = T(lambda);
  const T rest = T(1) - lam;
  Batch<T> out = b;
  auto mix_rows = [&](const Tensor<T>& src, Tensor<T>& dst, bool clamp) {
    const std::size_t per = src.size() / n;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = perm[i];
      if (j >= n) throw ShapeError("mixup permutation index out of range");
      if (j == i) continue;
      for (std::size_t k = 0; k < per; ++k) {
        T v = lam * src[i * per + k] + rest * src[j * per + k];
        if (clamp) v = std::clamp(v, T(0), T(1));
        dst[i * per + k] = v;
      }
    }
  };
  mix_rows(b.images, out.images, true);
  mix_rows(b.labels, out.labels, false);
  return out;
}

/// Draws lambda ~ Beta(alpha, alpha) and a uniform permutation, then mixes.
template <class T>
Batch<T> mixup(const Batch<T>& b, const MixupConfig& cfg, Rng& rng, double* lambda_out = nullptr) {
  cfg.validate();
  if (b.size() < 2) throw ShapeError("mixup needs a batch of at least 2 samples");
  const double lambda = sample_beta(rng, cfg.alpha, cfg.alpha);
  const auto perm = permutation(rng, b.size());
  if (lambda_out) *lambda_out = lambda;
  return mixup_with(b, lambda, perm);
}

// ---------------------------------------------------------------------------
// Single-image primitives on [C,H,W] buffers

enum class Primitive {
  identity,
  translate_x,
  translate_y,
  rotate,
  shear_x,
  shear_y,
  contrast,
  brightness,
  posterize,
  equalize
};

inline const std::vector<Primitive>& all_primitives() {
  static const std::vector<Primitive> p{Primitive::identity,   Primitive::translate_x,
                                        Primitive::translate_y, Primitive::rotate,
                                        Primitive::shear_x,    Primitive::shear_y,
                                        Primitive::contrast,   Primitive::brightness,
                                        Primitive::posterize,  Primitive::equalize};
  return p;
}

inline std::string to_string(Primitive p) {
  static const char* names[] = {"identity", "translate_x", "translate_y", "rotate",    "shear_x",
                                "shear_y",  "contrast",    "brightness",  "posterize", "equalize"};
  return names[int(p)];
}

inline Primitive primitive_from_string(const std::string& s) {
  for (auto p : all_primitives())
    if (to_string(p) == s) return p;
  throw ConfigError("unknown augmentation primitive '" + s + "'");
}

struct ImageGeom {
  std::size_t channels, height, width;
  std::size_t size() const { return channels * height * width; }
};

namespace detail {

/// Bilinear sample with edge replication.
template <class T>
T sample_bilinear(const T* plane, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, double(h - 1));
  x = std::clamp(x, 0.0, double(w - 1));
  const std::size_t y0 = std::size_t(std::floor(y));
  const std::size_t x0 = std::size_t(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1);
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const T fy = T(y - double(y0));
  const T fx = T(x - double(x0));
  const T top = plane[y0 * w + x0] * (T(1) - fx) + plane[y0 * w + x1] * fx;
  const T bot = plane[y1 * w + x0] * (T(1) - fx) + plane[y1 * w + x1] * fx;
  return top * (T(1) - fy) + bot * fy;
}

/// out(y,x) = in(map(y,x)) per channel, where map returns source (y,x).
template <class T, class Map>
void warp(const T* in, T* out, const ImageGeom& g, Map map) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* src = in + c * g.height * g.width;
    T* dst = out + c * g.height * g.width;
    for (std::size_t y = 0; y < g.height; ++y)
      for (std::size_t x = 0; x < g.width; ++x) {
        const auto [sy, sx] = map(double(y), double(x));
        dst[y * g.width + x] = sample_bilinear(src, g.height, g.width, sy, sx);
      }
  }
}

template <class T>
void equalize_lite(const T* in, T* out, const ImageGeom& g) {
  const std::size_t plane = g.height * g.width;
  for (std::size_t c = 0; c < g.channels; ++c) {
    std::array<std::size_t, 256> hist{};
    for (std::size_t i = 0; i < plane; ++i) {
      const T v = std::clamp(in[c * plane + i], T(0), T(1));
      ++hist[std::size_t(std::lround(double(v) * 255.0))];
    }
    std::array<double, 256> cdf{};
    std::size_t running = 0;
    for (std::size_t b = 0; b < 256; ++b) cdf[b] = double(running += hist[b]) / double(plane);
    const std::size_t first =
        std::size_t(std::find_if(hist.begin(), hist.end(), [](std::size_t h) { return h > 0; }) -
                    hist.begin());
    const double base = first < 256 ? cdf[first] : 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      const T v = std::clamp(in[c * plane + i], T(0), T(1));
      const std::size_t b = std::size_t(std::lround(double(v) * 255.0));
      out[c * plane + i] = base >= 1.0 ? v : T((cdf[b] - base) / (1.0 - base));
    }
  }
}

}  // namespace detail

/// Applies one primitive with an explicit magnitude. Units: translate in pixels,
/// rotate in degrees, shear and contrast/brightness as factors, posterize in bits.
template <class T>
void apply_primitive(const T* in, T* out, const ImageGeom& g, Primitive p, double magnitude) {
  const double cy = (double(g.height) - 1) / 2;
  const double cx = (double(g.width) - 1) / 2;
  const std::size_t n = g.size();
  switch (p) {
    case Primitive::identity:
      std::copy(in, in + n, out);
      return;
    case Primitive::translate_x:
      detail::warp(in, out, g, [&](double y, double x) { return std::pair{y, x - magnitude}; });
      return;
    case Primitive::translate_y:
      detail::warp(in, out, g, [&](double y, double x) { return std::pair{y - magnitude, x}; });
      return;
    case Primitive::rotate: {
      const double th = magnitude * std::numbers::pi / 180.0;
      const double c = std::cos(th), s = std::sin(th);
      detail::warp(in, out, g, [&](double y, double x) {
        const double dy = y - cy, dx = x - cx;
        return std::pair{cy - s * dx + c * dy, cx + c * dx + s * dy};
      });
      return;
    }
    case Primitive::shear_x:
      detail::warp(in, out, g,
                   [&](double y, double x) { return std::pair{y, x - magnitude * (y - cy)}; });
      return;
    case Primitive::shear_y:
      detail::warp(in, out, g,
                   [&](double y, double x) { return std::pair{y - magnitude * (x - cx), x}; });
      return;
    case Primitive::contrast: {
      double mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += double(in[i]);
      mean /= double(n);
      for (std::size_t i = 0; i < n; ++i)
        out[i] = T(std::clamp(double(in[i]) + (magnitude - 1) * (double(in[i]) - mean), 0.0, 1.0));
      return;
    }
    case Primitive::brightness:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::clamp(T(magnitude) * in[i], T(0), T(1));
      return;
    case Primitive::posterize: {
      const int bits = std::clamp(int(std::lround(magnitude)), 1, 8);
      const int shift = 8 - bits;
      for (std::size_t i = 0; i < n; ++i) {
        const int q = int(std::lround(double(std::clamp(in[i], T(0), T(1))) * 255.0));
        out[i] = T((q >> shift) << shift) / T(255);
      }
      return;
    }
    case Primitive::equalize:
      detail::equalize_lite(in, out, g);
      return;
  }
}

/// Random magnitude for a primitive, symmetric where the operation has a sign.
inline double sample_magnitude(Primitive p, const ImageGeom& g, Rng& rng) {
  switch (p) {
    case Primitive::translate_x:
      return uniform(rng, -0.25, 0.25) * double(g.width);
    case Primitive::translate_y:
      return uniform(rng, -0.25, 0.25) * double(g.height);
    case Primitive::rotate:
      return uniform(rng, -30.0, 30.0);
    case Primitive::shear_x:
    case Primitive::shear_y:
      return uniform(rng, -0.3, 0.3);
    case Primitive::contrast:
    case Primitive::brightness:
      return uniform(rng, 0.5, 1.5);
    case Primitive::posterize:
      return double(std::uniform_int_distribution<int>(4, 8)(rng));
    case Primitive::identity:
    case Primitive::equalize:
      return 0.0;
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// AugMix

struct AugmixConfig {
  std::size_t width = 3;
  std::size_t depth_min = 1;
  std::size_t depth_max = 3;
  double dirichlet_alpha = 1.0;
  double beta_alpha = 1.0;
  double jsd_weight = 12.0;
  std::vector<Primitive> primitives = all_primitives();

  void validate() const {
    if (width == 0) throw ConfigError("augmix width must be >= 1");
    if (depth_min == 0 || depth_max < depth_min) throw ConfigError("augmix depth range is invalid");
    if (!(dirichlet_alpha > 0) || !(beta_alpha > 0)) throw ConfigError("augmix alphas must be > 0");
    if (!(jsd_weight >= 0)) throw ConfigError("augmix jsd_weight must be >= 0");
    if (primitives.empty()) throw ConfigError("augmix needs at least one primitive");
  }
};

/// One AugMix view of a [C,H,W] image. `forced_m` overrides the Beta skip weight.
template <class T>
void augmix_image(const T* in, T* out, const ImageGeom& g, const AugmixConfig& cfg, Rng& rng,
                  std::optional<double> forced_m = std::nullopt) {
  const std::size_t n = g.size();
  const auto w = sample_dirichlet(rng, cfg.width, cfg.dirichlet_alpha);
  const double m = forced_m ? *forced_m : sample_beta(rng, cfg.beta_alpha, cfg.beta_alpha);
  std::vector<T> mix(n, T(0)), a(n), b(n);
  auto pick = std::uniform_int_distribution<std::size_t>(0, cfg.primitives.size() - 1);
  auto depth = std::uniform_int_distribution<std::size_t>(cfg.depth_min, cfg.depth_max);
  for (std::size_t chain = 0; chain < cfg.width; ++chain) {
    std::copy(in, in + n, a.begin());
    const std::size_t d = depth(rng);
    for (std::size_t s = 0; s < d; ++s) {
      const Primitive p = cfg.primitives[pick(rng)];
      apply_primitive(a.data(), b.data(), g, p, sample_magnitude(p, g, rng));
      std::swap(a, b);
    }
    if (cfg.width == 1) {
      mix = a;
    } else {
      for (std::size_t i = 0; i < n; ++i) mix[i] += T(w[chain]) * a[i];
    }
  }
  const T mt = T(m);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = std::clamp(in[i] + mt * (mix[i] - in[i]), T(0), T(1));
}

/// AugMix applied independently to every sample; per-sample streams keyed by `keys` and index.
template <class T>
Tensor<T> augmix_batch(const Tensor<T>& images, const AugmixConfig& cfg, std::uint64_t seed,
                       std::initializer_list<std::uint64_t> keys) {
  cfg.validate();
  const ImageGeom g{images.dim(1), images.dim(2), images.dim(3)};
  Tensor<T> out(images.shape());
  std::vector<std::uint64_t> base(keys);
  for (std::size_t i = 0; i < images.dim(0); ++i) {
    std::uint64_t h = seed;
    for (auto k : base) h = splitmix64(h ^ k);
    Rng rng = substream(h, {i});
    augmix_image(images.raw() + i * g.size(), out.raw() + i * g.size(), g, cfg, rng);
  }
  return out;
}

namespace detail {
inline constexpr double kProbFloor = 1e-12;

/// Sum of three values independent of argument order.
template <class T>
T symmetric_sum3(T a, T b, T c) {
  if (a > b) std::swap(a, b);
  if (b > c) std::swap(b, c);
  if (a > b) std::swap(a, b);
  return (a + b) + c;
}

template <class T>
void check_distribution_rows(const Tensor<T>& p) {
  const std::size_t k = p.shape().back();
  for (std::size_t r = 0; r < p.size() / k; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (p[r * k + j] < T(0)) throw DomainError("probability row has a negative entry");
      s += double(p[r * k + j]);
    }
    if (std::abs(s - 1.0) > 1e-4) throw DomainError("probability row does not sum to 1");
  }
}
}  // namespace detail

/// Batch-mean Jensen-Shannon divergence of three [N,K] distributions,
///   (1/3) sum_i KL(p_i || M),  M = (p1+p2+p3)/3,
/// with probabilities floored at 1e-12 inside the logarithms. The value is
/// bitwise invariant under permutation of the arguments.
template <class T>
Var<T> jsd_loss(const Var<T>& p1, const Var<T>& p2, const Var<T>& p3) {
  if (p1.shape() != p2.shape() || p1.shape() != p3.shape() || p1.shape().size() != 2) {
    throw ShapeError("jsd expects three [N,K] tensors of the same shape");
  }
  detail::check_distribution_rows(p1.value());
  detail::check_distribution_rows(p2.value());
  detail::check_distribution_rows(p3.value());
  const std::size_t n = p1.shape()[0], k = p1.shape()[1];
  const T floor = T(detail::kProbFloor);
  const T* a = p1.value().raw();
  const T* b = p2.value().raw();
  const T* c = p3.value().raw();
  double total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    T row = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t i = r * k + j;
      const T m = detail::symmetric_sum3(a[i], b[i], c[i]) / T(3);
      const T lm = std::log(std::max(m, floor));
      auto term = [&](T p) { return p * (std::log(std::max(p, floor)) - lm); };
      row += detail::symmetric_sum3(term(a[i]), term(b[i]), term(c[i]));
    }
    total += double(row);
  }
  const T value = std::max(T(0), T(total / (3.0 * double(n))));
  return make_op<T>(
      "jsd", Tensor<T>::scalar(value), {p1, p2, p3},
      [n](const Var<T>&, const std::vector<Var<T>>& in, const Var<T>& g,
          const std::vector<bool>& needs) -> std::vector<Var<T>> {
        const T floor = T(detail::kProbFloor);
        const Var<T> m = scale(in[0] + in[1] + in[2], T(1) / T(3));
        const Var<T> lm = log(clamp_min(m, floor));
        const Var<T> coef = scale(g, T(1) / T(3 * n));
        std::vector<Var<T>> out(3);
        for (std::size_t i = 0; i < 3; ++i)
          if (needs[i]) out[i] = coef * (log(clamp_min(in[i], floor)) - lm);
        return out;
      });
}

// ---------------------------------------------------------------------------
// NoisyMix (input-level)

struct NoisymixConfig {
  double mixup_alpha = 1.0;
  double additive_std = 0.1;
  double multiplicative_std = 0.1;
  double stability_weight = 1.0;

  void validate() const {
    if (!(mixup_alpha > 0)) throw ConfigError("noisymix mixup_alpha must be > 0");
    if (!(additive_std >= 0) || !(multiplicative_std >= 0)) {
      throw ConfigError("noisymix noise levels must be >= 0");
    }
    if (!(stability_weight >= 0)) throw ConfigError("noisymix stability_weight must be >= 0");
  }
};

template <class T>
struct NoisymixResult {
  Batch<T> noisy;  // mixed and noise-perturbed
  Batch<T> clean;  // mixed only
};

/// Adds x*(1+N(0,m)) + N(0,a) noise per pixel and clamps to [0,1].
template <class T>
Tensor<T> add_input_noise(const Tensor<T>& x, double additive_std, double multiplicative_std,
                          Rng& rng) {
  Tensor<T> out = x;
  if (additive_std == 0 && multiplicative_std == 0) return out;
  for (auto& v : out.data()) {
    const double mul = multiplicative_std > 0 ? normal(rng, 0.0, multiplicative_std) : 0.0;
    const double add = additive_std > 0 ? normal(rng, 0.0, additive_std) : 0.0;
    v = T(std::clamp(double(v) * (1.0 + mul) + add, 0.0, 1.0));
  }
  return out;
}

template <class T>
NoisymixResult<T> noisymix(const Batch<T>& b, const NoisymixConfig& cfg, Rng& rng) {
  cfg.validate();
  const Batch<T> mixed = mixup(b, MixupConfig{cfg.mixup_alpha}, rng);
  Batch<T> noisy{add_input_noise(mixed.images, cfg.additive_std, cfg.multiplicative_std, rng),
                 mixed.labels};
  return {std::move(noisy), mixed};
}

/// Batch-mean KL(softmax(clean) || softmax(noisy)) from logits.
template <class T>
Var<T> stability_kl(const Var<T>& clean_logits, const Var<T>& noisy_logits) {
  const Var<T> lp = log_softmax(clean_logits);
  const Var<T> lq = log_softmax(noisy_logits);
  return mean(sum_last(exp(lp) * (lp - lq)));
}

}  // namespace droaug
