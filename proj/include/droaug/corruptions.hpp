// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Parametric image corruptions, severity calibration against reference
// accuracy anchors, and persisted corrupted evaluation sets.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "droaug/augment.hpp"
#include "droaug/data.hpp"
#include "droaug/data_io.hpp"
#include "droaug/errors.hpp"
#include "droaug/models.hpp"
#include "droaug/rng.hpp"

namespace droaug {

enum class CorruptionKind {
  gaussian_noise,
  shot_noise,
  impulse_noise,
  defocus_blur,
  motion_blur,
  zoom_blur,
  contrast,
  brightness,
  pixelate
};

inline const std::vector<CorruptionKind>& all_corruptions() {
  static const std::vector<CorruptionKind> k{
      CorruptionKind::gaussian_noise, CorruptionKind::shot_noise,  CorruptionKind::impulse_noise,
      CorruptionKind::defocus_blur,   CorruptionKind::motion_blur, CorruptionKind::zoom_blur,
      CorruptionKind::contrast,       CorruptionKind::brightness,  CorruptionKind::pixelate};
  return k;
}

inline std::string to_string(CorruptionKind k) {
  static const char* names[] = {"gaussian_noise", "shot_noise", "impulse_noise",
                                "defocus_blur",   "motion_blur", "zoom_blur",
                                "contrast",       "brightness",  "pixelate"};
  return names[int(k)];
}

inline CorruptionKind corruption_from_string(const std::string& s) {
  for (auto k : all_corruptions())
    if (to_string(k) == s) return k;
  throw ConfigError("unknown corruption kind '" + s + "'");
}

/// Parameter names per kind:
///   gaussian_noise {sigma}          shot_noise {lambda_scale} (absent = no noise)
///   impulse_noise {flip_prob}       defocus_blur {kernel_radius}
///   motion_blur {length, angle}     zoom_blur {max_zoom}
///   contrast {contrast_factor}      brightness {brightness_delta}
///   pixelate {downscale_factor}
struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  std::map<std::string, double> params;
  int severity = 0;

  double get(const std::string& name, double fallback) const {
    auto it = params.find(name);
    return it == params.end() ? fallback : it->second;
  }
};

namespace detail {

struct ParamRange {
  const char* name;
  double lo, hi, neutral;
};

inline std::vector<ParamRange> param_ranges(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::gaussian_noise: return {{"sigma", 0, 5, 0}};
    case CorruptionKind::shot_noise: return {{"lambda_scale", 1e-3, 1e12, 1e12}};
    case CorruptionKind::impulse_noise: return {{"flip_prob", 0, 1, 0}};
    case CorruptionKind::defocus_blur: return {{"kernel_radius", 0, 10, 0}};
    case CorruptionKind::motion_blur: return {{"length", 0, 15, 0}, {"angle", -360, 360, 0}};
    case CorruptionKind::zoom_blur: return {{"max_zoom", 0, 1, 0}};
    case CorruptionKind::contrast: return {{"contrast_factor", 0, 1, 1}};
    case CorruptionKind::brightness: return {{"brightness_delta", -1, 1, 0}};
    case CorruptionKind::pixelate: return {{"downscale_factor", 1, 8, 1}};
  }
  return {};
}

}  // namespace detail

/// Throws ConfigError on unknown parameter names or out-of-range values.
inline void validate(const CorruptionSpec& s) {
  const auto ranges = detail::param_ranges(s.kind);
  for (const auto& [name, v] : s.params) {
    auto it = std::find_if(ranges.begin(), ranges.end(), [&](const auto& r) { return r.name == name; });
    if (it == ranges.end()) throw ConfigError(to_string(s.kind) + ": unknown parameter '" + name + "'");
    if (!(v >= it->lo && v <= it->hi)) {
      throw ConfigError(to_string(s.kind) + ": parameter " + name + "=" + std::to_string(v) +
                        " outside [" + std::to_string(it->lo) + ", " + std::to_string(it->hi) + "]");
    }
  }
}

/// True when the parameters leave every image unchanged.
inline bool is_neutral(const CorruptionSpec& s) {
  const auto ranges = detail::param_ranges(s.kind);
  const std::string primary = ranges.front().name;
  if (s.kind == CorruptionKind::shot_noise) return !s.params.count(primary);
  return s.get(primary, ranges.front().neutral) == ranges.front().neutral;
}

/// Maps a scalar intensity t >= 0 (0 = neutral, larger = stronger) to parameters.
inline CorruptionSpec spec_from_intensity(CorruptionKind k, double t, int severity = 0) {
  if (!(t >= 0)) throw ConfigError("corruption intensity must be >= 0");
  CorruptionSpec s{k, {}, severity};
  switch (k) {
    case CorruptionKind::gaussian_noise: s.params["sigma"] = t; break;
    case CorruptionKind::shot_noise:
      if (t > 0) s.params["lambda_scale"] = 1.0 / t;
      break;
    case CorruptionKind::impulse_noise: s.params["flip_prob"] = t; break;
    case CorruptionKind::defocus_blur: s.params["kernel_radius"] = t; break;
    case CorruptionKind::motion_blur: s.params["length"] = t; break;
    case CorruptionKind::zoom_blur: s.params["max_zoom"] = t; break;
    case CorruptionKind::contrast: s.params["contrast_factor"] = 1.0 - t; break;
    case CorruptionKind::brightness: s.params["brightness_delta"] = t; break;
    case CorruptionKind::pixelate: s.params["downscale_factor"] = 1.0 + t; break;
  }
  validate(s);
  return s;
}

/// Largest sensible intensity for bisection brackets.
inline double max_intensity(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::gaussian_noise: return 5;
    case CorruptionKind::shot_noise: return 1000;
    case CorruptionKind::impulse_noise: return 1;
    case CorruptionKind::defocus_blur: return 10;
    case CorruptionKind::motion_blur: return 15;
    case CorruptionKind::zoom_blur: return 1;
    case CorruptionKind::contrast: return 1;
    case CorruptionKind::brightness: return 1;
    case CorruptionKind::pixelate: return 7;
  }
  return 1;
}

namespace detail {

/// Normalized convolution kernel of odd side length, centred.
struct Kernel {
  std::size_t side = 1;
  std::vector<double> w{1.0};
};

inline Kernel disc_kernel(double radius) {
  Kernel k;
  const int half = int(std::ceil(radius + 0.5));
  k.side = std::size_t(2 * half + 1);
  k.w.assign(k.side * k.side, 0);
  double total = 0;
  for (int y = -half; y <= half; ++y)
    for (int x = -half; x <= half; ++x) {
      const double d = std::hypot(double(x), double(y));
      const double v = std::clamp(radius + 0.5 - d, 0.0, 1.0);
      k.w[std::size_t((y + half) * int(k.side) + x + half)] = v;
      total += v;
    }
  for (auto& v : k.w) v /= total;
  return k;
}

inline Kernel line_kernel(double length, double angle_deg) {
  Kernel k;
  const int half = int(std::ceil(length / 2 + 1));
  k.side = std::size_t(2 * half + 1);
  k.w.assign(k.side * k.side, 0);
  const std::size_t samples = std::max<std::size_t>(2, std::size_t(std::ceil(length * 4)) + 1);
  const double a = angle_deg * std::numbers::pi / 180;
  for (std::size_t s = 0; s < samples; ++s) {
    const double t = (double(s) / double(samples - 1) - 0.5) * length;
    const double px = t * std::cos(a) + half, py = t * std::sin(a) + half;
    const int x0 = int(std::floor(px)), y0 = int(std::floor(py));
    const double fx = px - x0, fy = py - y0;
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double v = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy);
        if (v > 0) k.w[std::size_t((y0 + dy) * int(k.side) + x0 + dx)] += v;
      }
  }
  double total = 0;
  for (double v : k.w) total += v;
  for (auto& v : k.w) v /= total;
  return k;
}

inline void convolve(const float* in, float* out, const ImageGeom& g, const Kernel& k) {
  const int half = int(k.side / 2);
  const int h = int(g.height), w = int(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const float* src = in + c * g.height * g.width;
    float* dst = out + c * g.height * g.width;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int ky = 0; ky < int(k.side); ++ky)
          for (int kx = 0; kx < int(k.side); ++kx) {
            const double wv = k.w[std::size_t(ky) * k.side + std::size_t(kx)];
            if (wv == 0) continue;
            const int sy = std::clamp(y + ky - half, 0, h - 1);
            const int sx = std::clamp(x + kx - half, 0, w - 1);
            acc += wv * src[sy * w + sx];
          }
        dst[y * w + x] = float(std::clamp(acc, 0.0, 1.0));
      }
  }
}

/// Blocks of side `factor` (fractional, grid centred on the image), each the
/// area-weighted mean of the pixels it covers; pixels then take their block's value.
inline void pixelate(const float* in, float* out, const ImageGeom& g, double factor) {
  struct Axis {
    std::size_t blocks;
    double offset;
    std::vector<std::vector<std::pair<std::size_t, double>>> cover;  // per block: (pixel, overlap)
    std::vector<std::size_t> block_of;                               // per pixel
  };
  auto make_axis = [factor](std::size_t n) {
    Axis a;
    a.blocks = std::size_t(std::ceil(double(n) / factor - 1e-9));
    a.offset = (double(n) - double(a.blocks) * factor) / 2;
    a.cover.resize(a.blocks);
    for (std::size_t j = 0; j < a.blocks; ++j) {
      const double lo = a.offset + double(j) * factor, hi = lo + factor;
      for (std::size_t p = std::size_t(std::max(0.0, std::floor(lo))); p < n && double(p) < hi; ++p) {
        const double ov = std::min(hi, double(p + 1)) - std::max(lo, double(p));
        if (ov > 0) a.cover[j].emplace_back(p, ov);
      }
    }
    for (std::size_t p = 0; p < n; ++p) {
      const double j = std::floor((double(p) + 0.5 - a.offset) / factor);
      a.block_of.push_back(std::min(a.blocks - 1, std::size_t(std::max(0.0, j))));
    }
    return a;
  };
  const Axis ay = make_axis(g.height), ax = make_axis(g.width);
  std::vector<double> small(ay.blocks * ax.blocks);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const float* src = in + c * g.height * g.width;
    float* dst = out + c * g.height * g.width;
    for (std::size_t i = 0; i < ay.blocks; ++i)
      for (std::size_t j = 0; j < ax.blocks; ++j) {
        double acc = 0, area = 0;
        for (auto [y, wy] : ay.cover[i])
          for (auto [x, wx] : ax.cover[j]) {
            acc += wy * wx * src[y * g.width + x];
            area += wy * wx;
          }
        small[i * ax.blocks + j] = acc / area;
      }
    for (std::size_t y = 0; y < g.height; ++y)
      for (std::size_t x = 0; x < g.width; ++x)
        dst[y * g.width + x] = float(std::clamp(small[ay.block_of[y] * ax.blocks + ax.block_of[x]], 0.0, 1.0));
  }
}

inline void zoom_blur(const float* in, float* out, const ImageGeom& g, double max_zoom) {
  constexpr std::size_t kZooms = 8;
  const double cy = (double(g.height) - 1) / 2, cx = (double(g.width) - 1) / 2;
  std::vector<double> acc(g.size(), 0);
  std::vector<float> tmp(g.size());
  for (std::size_t z = 0; z < kZooms; ++z) {
    const double f = 1.0 + max_zoom * double(z) / double(kZooms - 1);
    warp(in, tmp.data(), g, [&](double y, double x) {
      return std::pair{cy + (y - cy) / f, cx + (x - cx) / f};
    });
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += tmp[i];
  }
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = float(std::clamp(acc[i] / kZooms, 0.0, 1.0));
}

}  // namespace detail

/// Corrupts one [C,H,W] image. Neutral parameters return the input unchanged.
inline void corrupt_image(const float* in, float* out, const ImageGeom& g, const CorruptionSpec& s,
                          Rng& rng) {
  validate(s);
  const std::size_t n = g.size();
  if (is_neutral(s)) {
    std::copy(in, in + n, out);
    return;
  }
  switch (s.kind) {
    case CorruptionKind::gaussian_noise: {
      std::normal_distribution<double> d(0.0, s.get("sigma", 0));
      for (std::size_t i = 0; i < n; ++i) out[i] = float(std::clamp(in[i] + d(rng), 0.0, 1.0));
      return;
    }
    case CorruptionKind::shot_noise: {
      const double lam = s.get("lambda_scale", 1e12);
      for (std::size_t i = 0; i < n; ++i) {
        const double mean = double(in[i]) * lam;
        const double k = mean > 0 ? double(std::poisson_distribution<long long>(mean)(rng)) : 0.0;
        out[i] = float(std::clamp(k / lam, 0.0, 1.0));
      }
      return;
    }
    case CorruptionKind::impulse_noise: {
      const double p = s.get("flip_prob", 0);
      std::bernoulli_distribution flip(p), salt(0.5);
      for (std::size_t i = 0; i < n; ++i) out[i] = flip(rng) ? (salt(rng) ? 1.0f : 0.0f) : in[i];
      return;
    }
    case CorruptionKind::defocus_blur:
      detail::convolve(in, out, g, detail::disc_kernel(s.get("kernel_radius", 0)));
      return;
    case CorruptionKind::motion_blur:
      detail::convolve(in, out, g, detail::line_kernel(s.get("length", 0), s.get("angle", 0)));
      return;
    case CorruptionKind::zoom_blur:
      detail::zoom_blur(in, out, g, s.get("max_zoom", 0));
      return;
    case CorruptionKind::contrast: {
      const double f = s.get("contrast_factor", 1);
      for (std::size_t i = 0; i < n; ++i) out[i] = float(0.5 + (double(in[i]) - 0.5) * f);
      return;
    }
    case CorruptionKind::brightness: {
      const double d = s.get("brightness_delta", 0);
      for (std::size_t i = 0; i < n; ++i) out[i] = float(std::clamp(double(in[i]) + d, 0.0, 1.0));
      return;
    }
    case CorruptionKind::pixelate:
      detail::pixelate(in, out, g, s.get("downscale_factor", 1));
      return;
  }
}

/// Corrupts every image; sample i draws from the stream keyed by (seed, i).
inline Dataset corrupt_dataset(const Dataset& d, const CorruptionSpec& s, std::uint64_t seed) {
  validate(s);
  Dataset out = d;
  const ImageGeom g{d.images.dim(1), d.images.dim(2), d.images.dim(3)};
  for (std::size_t i = 0; i < d.size(); ++i) {
    Rng rng = substream(seed, {std::uint64_t(s.kind), std::uint64_t(s.severity), i});
    corrupt_image(d.image(i).data(), out.image(i).data(), g, s, rng);
  }
  return out;
}

struct CorruptedSet {
  CorruptionSpec spec;
  std::uint64_t seed = 0;
  Dataset data;
};

inline std::vector<CorruptedSet> build_corrupted_set(const Dataset& d, const std::vector<CorruptionSpec>& specs,
                                                     std::uint64_t seed) {
  std::vector<CorruptedSet> out;
  for (const auto& s : specs) out.push_back({s, seed, corrupt_dataset(d, s, seed)});
  return out;
}

/// CRC32 of the quantized images and labels, as "crc32:xxxxxxxx".
inline std::string dataset_digest(const Dataset& d) {
  const auto img = serialize_idx(images_to_idx(d));
  const auto lab = serialize_idx(labels_to_idx(d));
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, img.data(), uInt(img.size()));
  crc = crc32(crc, lab.data(), uInt(lab.size()));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "crc32:%08lx", crc);
  return buf;
}

inline nlohmann::json manifest_json(const CorruptedSet& c, const Dataset& source) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [k, v] : c.spec.params) params[k] = v;
  return {{"kind", to_string(c.spec.kind)}, {"severity", c.spec.severity}, {"params", params},
          {"seed", c.seed},                 {"source_digest", dataset_digest(source)}};
}

inline std::string corrupted_stem(const CorruptionSpec& s) {
  return to_string(s.kind) + "-s" + std::to_string(s.severity);
}

/// Writes <stem>-images-idx3-ubyte, <stem>-labels-idx1-ubyte and <stem>.json into `dir`.
inline void write_corrupted_set(const CorruptedSet& c, const Dataset& source,
                                const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string stem = corrupted_stem(c.spec);
  save_idx(c.data, dir / (stem + "-images-idx3-ubyte"), dir / (stem + "-labels-idx1-ubyte"));
  nlohmann::json m = manifest_json(c, source);
  m["images"] = stem + "-images-idx3-ubyte";
  m["labels"] = stem + "-labels-idx1-ubyte";
  std::ofstream os(dir / (stem + ".json"));
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  os << m.dump(2) << "\n";
}

inline CorruptionSpec spec_from_manifest(const nlohmann::json& m) {
  CorruptionSpec s;
  s.kind = corruption_from_string(m.at("kind").get<std::string>());
  s.severity = m.value("severity", 0);
  for (const auto& [k, v] : m.at("params").items()) s.params[k] = v.get<double>();
  validate(s);
  return s;
}

/// Regenerates the set described by a manifest from its source dataset.
inline Dataset regenerate_from_manifest(const nlohmann::json& m, const Dataset& source) {
  if (m.at("source_digest").get<std::string>() != dataset_digest(source)) {
    throw FormatError("manifest source digest does not match the provided source dataset");
  }
  return corrupt_dataset(source, spec_from_manifest(m), m.at("seed").get<std::uint64_t>());
}

// ---------------------------------------------------------------------------
// Calibration

inline const std::array<double, 5>& anchors_c10_like() {
  static const std::array<double, 5> a{0.85, 0.79, 0.70, 0.62, 0.51};
  return a;
}
inline const std::array<double, 5>& anchors_c100_like() {
  static const std::array<double, 5> a{0.60, 0.50, 0.40, 0.30, 0.20};
  return a;
}

struct CalibrationResult {
  double intensity = 0;
  double accuracy = 0;
  std::size_t evaluations = 0;
  bool converged = false;
  CorruptionSpec spec;
};

/// Accuracy as a function of corruption intensity.
using AccuracyAt = std::function<double(double intensity)>;

/// Bisection on intensity in [lo, hi] until |accuracy - target| <= tol. The two
/// bracket evaluations count towards max_evals. Accuracy is assumed to decrease
/// with intensity; a target outside [acc(hi), acc(lo)] is a ConfigError.
inline CalibrationResult bisect_intensity(const AccuracyAt& acc_at, double target, double lo, double hi,
                                          double tol = 0.02, std::size_t max_evals = 20) {
  if (!(lo < hi)) throw ConfigError("calibration bracket must satisfy lo < hi");
  if (max_evals < 2) throw ConfigError("calibration needs at least 2 evaluations");
  CalibrationResult r;
  auto record = [&](double t, double a) {
    if (r.evaluations == 0 || std::abs(a - target) < std::abs(r.accuracy - target)) {
      r.intensity = t;
      r.accuracy = a;
    }
    ++r.evaluations;
    r.converged = std::abs(a - target) <= tol;
    if (r.converged) r.intensity = t, r.accuracy = a;
    return r.converged;
  };
  const double acc_lo = acc_at(lo);
  if (record(lo, acc_lo)) return r;
  const double acc_hi = acc_at(hi);
  if (record(hi, acc_hi)) return r;
  if (!(acc_lo >= target && target >= acc_hi)) {
    throw ConfigError("calibration target " + std::to_string(target) + " outside achievable range [" +
                      std::to_string(acc_hi) + ", " + std::to_string(acc_lo) + "]");
  }
  while (r.evaluations < max_evals) {
    const double mid = 0.5 * (lo + hi);
    const double a = acc_at(mid);
    if (record(mid, a)) return r;
    (a > target ? lo : hi) = mid;
  }
  return r;
}

/// Calibrates one corruption kind to a target accuracy of `model` on `eval_set`,
/// using a fixed noise seed for every evaluation. The returned spec carries
/// `severity`, which also keys the noise stream, so it reproduces the accuracy.
template <class T>
CalibrationResult calibrate_severity(CorruptionKind kind, double target, const Model<T>& model,
                                     const Dataset& eval_set, double lo, double hi, std::uint64_t seed,
                                     double tol = 0.02, std::size_t max_evals = 20,
                                     std::size_t min_eval_samples = 1000, int severity = 0) {
  if (eval_set.size() < min_eval_samples) {
    throw ConfigError("calibration needs at least " + std::to_string(min_eval_samples) + " samples");
  }
  auto acc_at = [&](double t) {
    return accuracy(model, corrupt_dataset(eval_set, spec_from_intensity(kind, t, severity), seed));
  };
  CalibrationResult r = bisect_intensity(acc_at, target, lo, hi, tol, max_evals);
  r.spec = spec_from_intensity(kind, r.intensity, severity);
  return r;
}

/// Calibrates one severity level per anchor, narrowing the bracket as severities increase.
template <class T>
std::vector<CalibrationResult> calibrate_levels(CorruptionKind kind, const std::array<double, 5>& anchors,
                                                const Model<T>& model, const Dataset& eval_set,
                                                std::uint64_t seed, double tol = 0.02,
                                                std::size_t max_evals = 20, double hi = -1) {
  if (hi < 0) hi = max_intensity(kind);
  std::vector<CalibrationResult> out;
  double lo = 0;
  for (std::size_t s = 0; s < anchors.size(); ++s) {
    const CalibrationResult r =
        calibrate_severity(kind, anchors[s], model, eval_set, lo, hi, seed, tol, max_evals, 1000, int(s + 1));
    lo = r.intensity;
    out.push_back(r);
  }
  return out;
}

struct CorruptionAccuracy {
  CorruptionKind kind;
  int severity;
  double accuracy;
};

struct CorruptionReport {
  std::vector<CorruptionAccuracy> entries;
  double mean_accuracy = 0;
};

template <class T>
CorruptionReport mean_corruption_accuracy(const Model<T>& model, const std::vector<CorruptedSet>& sets) {
  if (sets.empty()) throw ConfigError("no corrupted sets to evaluate");
  CorruptionReport r;
  for (const auto& c : sets) {
    r.entries.push_back({c.spec.kind, c.spec.severity, accuracy(model, c.data)});
    r.mean_accuracy += r.entries.back().accuracy;
  }
  r.mean_accuracy /= double(sets.size());
  return r;
}

}  // namespace droaug
