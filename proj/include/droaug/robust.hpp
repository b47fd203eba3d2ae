// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Variation-regularized surrogate for Wasserstein distributionally robust
// risk, plus a brute-force inner-maximization oracle used to measure the
// surrogate's approximation gap.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "droaug/autodiff.hpp"
#include "droaug/data.hpp"
#include "droaug/errors.hpp"
#include "droaug/models.hpp"
#include "droaug/rng.hpp"

namespace droaug {

/// Norm applied to each per-sample input gradient.
enum class GradNorm { l2, l1, linf };

inline std::string to_string(GradNorm n) {
  switch (n) {
    case GradNorm::l2: return "l2";
    case GradNorm::l1: return "l1";
    case GradNorm::linf: return "linf";
  }
  return "?";
}

inline GradNorm grad_norm_from_string(const std::string& s) {
  if (s == "l2") return GradNorm::l2;
  if (s == "l1") return GradNorm::l1;
  if (s == "linf") return GradNorm::linf;
  throw ConfigError("unknown grad_norm '" + s + "' (expected l2, l1 or linf)");
}

struct RobustLossConfig {
  double rho = 0.05;
  double q = 1.0;
  GradNorm grad_norm = GradNorm::l2;
  double smooth_eps = 1e-12;

  void validate() const {
    if (!(rho >= 0) || !std::isfinite(rho)) throw ConfigError("rho must be >= 0");
    if (!(q >= 1) || !std::isfinite(q)) throw ConfigError("q must be >= 1");
    if (!(smooth_eps > 0)) throw ConfigError("smooth_eps must be > 0");
  }
};

/// Per-sample loss at a batch of points. Row i of `x` is scored against the
/// target of sample owner[i]; the result has shape [rows].
template <class T>
using SampleLoss = std::function<Var<T>(const Var<T>& x, std::span<const std::size_t> owner)>;

/// Cross entropy of `model` against the label rows of `labels`.
template <class T>
SampleLoss<T> model_sample_loss(const Model<T>& model, const Tensor<T>& labels) {
  return [&model, labels](const Var<T>& x, std::span<const std::size_t> owner) {
    const std::size_t k = labels.dim(1);
    Tensor<T> rows(Shape{owner.size(), k});
    for (std::size_t i = 0; i < owner.size(); ++i)
      std::copy(labels.raw() + owner[i] * k, labels.raw() + (owner[i] + 1) * k, rows.raw() + i * k);
    return per_sample_cross_entropy(model.forward(x), Var<T>::constant(std::move(rows)));
  };
}

template <class T>
struct InputGradients {
  Var<T> inputs;  // leaf holding the batch images
  Var<T> losses;  // [N] per-sample losses
  Var<T> grads;   // d(sum losses)/d inputs, differentiable
};

/// Per-sample input gradients; because each loss depends only on its own
/// row, the gradient of the summed loss separates row by row.
template <class T>
InputGradients<T> per_sample_input_gradients(const SampleLoss<T>& loss, const Tensor<T>& x) {
  InputGradients<T> r;
  r.inputs = Var<T>::leaf(x, true);
  std::vector<std::size_t> owner(x.dim(0));
  for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = i;
  r.losses = loss(r.inputs, owner);
  r.grads = grad(sum(r.losses), {r.inputs}, /*retain=*/true)[0];
  return r;
}

template <class T>
InputGradients<T> per_sample_input_gradients(const Model<T>& model, const Batch<T>& b) {
  return per_sample_input_gradients(model_sample_loss(model, b.labels), b.images);
}

/// Smoothed per-row norms of [N,...] gradients, returned as [N,1].
template <class T>
Var<T> smoothed_row_norms(const Var<T>& grads, GradNorm norm, double smooth_eps) {
  const std::size_t n = grads.shape()[0];
  const Var<T> g = reshape(grads, Shape{n, grads.size() / n});
  const T e2 = T(smooth_eps * smooth_eps);
  switch (norm) {
    case GradNorm::l2: return sqrt(sum_last(square(g)) + e2);
    case GradNorm::l1: return sum_last(sqrt(square(g) + e2));
    case GradNorm::linf: return max_last(sqrt(square(g) + e2));
  }
  throw ConfigError("unknown grad norm");
}

/// ((1/N) sum_i ||g_i||^q)^(1/q) for per-sample gradients g.
template <class T>
Var<T> penalty_from_gradients(const Var<T>& grads, const RobustLossConfig& cfg) {
  const Var<T> norms = smoothed_row_norms(grads, cfg.grad_norm, cfg.smooth_eps);
  if (cfg.q == 1.0) return mean(norms);
  return power(mean(power(norms, T(cfg.q))), T(1.0 / cfg.q));
}

template <class T>
Var<T> variation_penalty(const Model<T>& model, const Batch<T>& b, const RobustLossConfig& cfg) {
  cfg.validate();
  return penalty_from_gradients(per_sample_input_gradients(model, b).grads, cfg);
}

template <class T>
struct RobustLoss {
  Var<T> total;
  Var<T> ce;
  Var<T> penalty;  // undefined when rho == 0
};

/// Mean cross entropy plus rho times the variation penalty. With rho == 0 the
/// total is the plain cross entropy node and no input gradients are formed.
template <class T>
RobustLoss<T> robust_loss(const Model<T>& model, const Batch<T>& b, const RobustLossConfig& cfg) {
  cfg.validate();
  RobustLoss<T> r;
  if (cfg.rho == 0) {
    r.ce = cross_entropy(model.forward(Var<T>::constant(b.images)), Var<T>::constant(b.labels));
    r.total = r.ce;
    return r;
  }
  const auto ig = per_sample_input_gradients(model, b);
  r.ce = mean(ig.losses);
  r.penalty = penalty_from_gradients(ig.grads, cfg);
  r.total = r.ce + scale(r.penalty, T(cfg.rho));
  return r;
}

// ---------------------------------------------------------------------------
// Brute-force inner maximization

enum class BallNorm { l2, linf };
enum class OracleMethod { grid, ascent };

inline BallNorm ball_norm_from_string(const std::string& s) {
  if (s == "l2") return BallNorm::l2;
  if (s == "linf") return BallNorm::linf;
  throw ConfigError("unknown ball norm '" + s + "' (expected l2 or linf)");
}

/// Dual of the transport-cost norm, used for the matching surrogate.
inline GradNorm dual_norm(BallNorm b) { return b == BallNorm::l2 ? GradNorm::l2 : GradNorm::l1; }

struct WdroOracleConfig {
  double rho = 0.01;
  BallNorm ball = BallNorm::l2;
  OracleMethod method = OracleMethod::ascent;
  std::size_t grid_points = 401;  // per dimension; odd so that 0 is on the grid
  std::size_t steps = 100;
  double step_size = 0;  // 0 selects rho / 10
  std::size_t restarts = 20;
  std::uint64_t seed = 0;

  double effective_step() const { return step_size > 0 ? step_size : rho / 10; }

  void validate() const {
    if (!(rho >= 0) || !std::isfinite(rho)) throw ConfigError("oracle rho must be >= 0");
    if (method == OracleMethod::grid && (grid_points < 3 || grid_points % 2 == 0)) {
      throw ConfigError("oracle grid_points must be odd and >= 3");
    }
    if (method == OracleMethod::ascent && restarts == 0) throw ConfigError("oracle restarts must be >= 1");
  }
};

struct OracleResult {
  double value = 0;  // mean over samples of the per-sample maximum
  std::vector<double> per_sample;
};

namespace detail {

template <class T>
std::vector<double> eval_rows(const SampleLoss<T>& loss, const Tensor<T>& x,
                              std::span<const std::size_t> owner) {
  NoGradGuard ng;
  const Var<T> l = loss(Var<T>::constant(x), owner);
  return std::vector<double>(l.value().vec().begin(), l.value().vec().end());
}

template <class T>
void project(std::span<T> delta, BallNorm ball, double rho) {
  if (ball == BallNorm::linf) {
    for (auto& d : delta) d = std::clamp(d, T(-rho), T(rho));
    return;
  }
  double n2 = 0;
  for (T d : delta) n2 += double(d) * double(d);
  const double n = std::sqrt(n2);
  if (n > rho) {
    const double s = rho / n;
    for (auto& d : delta) d = T(double(d) * s);
  }
}

template <class T>
OracleResult grid_oracle(const SampleLoss<T>& loss, const Tensor<T>& x, const WdroOracleConfig& cfg) {
  const std::size_t n = x.dim(0), d = x.size() / n;
  if (d > 3) throw ConfigError("grid oracle supports at most 3 input dimensions");
  const std::size_t g = cfg.grid_points;
  std::vector<double> axis(g);
  for (std::size_t j = 0; j < g; ++j) axis[j] = -cfg.rho + 2.0 * cfg.rho * double(j) / double(g - 1);
  axis[0] = -cfg.rho;
  axis[g / 2] = 0;
  axis[g - 1] = cfg.rho;
  std::size_t total = 1;
  for (std::size_t k = 0; k < d; ++k) total *= g;

  OracleResult r;
  r.per_sample.assign(n, -std::numeric_limits<double>::infinity());
  const std::size_t chunk = 8192;
  Shape shape = x.shape();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t start = 0; start < total; start += chunk) {
      const std::size_t cnt = std::min(chunk, total - start);
      shape[0] = cnt;
      Tensor<T> pts(shape);
      std::vector<T> delta(d);
      for (std::size_t p = 0; p < cnt; ++p) {
        std::size_t code = start + p;
        for (std::size_t k = 0; k < d; ++k) {
          delta[k] = T(axis[code % g]);
          code /= g;
        }
        project<T>(delta, cfg.ball, cfg.rho);
        for (std::size_t k = 0; k < d; ++k) pts[p * d + k] = x[i * d + k] + delta[k];
      }
      const std::vector<std::size_t> owner(cnt, i);
      for (double v : eval_rows(loss, pts, owner)) r.per_sample[i] = std::max(r.per_sample[i], v);
    }
  }
  for (double v : r.per_sample) r.value += v;
  r.value /= double(n);
  return r;
}

template <class T>
OracleResult ascent_oracle(const SampleLoss<T>& loss, const Tensor<T>& x, const WdroOracleConfig& cfg) {
  const std::size_t n = x.dim(0), d = x.size() / n;
  const double step = cfg.effective_step();
  std::vector<std::size_t> owner(n);
  for (std::size_t i = 0; i < n; ++i) owner[i] = i;

  OracleResult r;
  r.per_sample = eval_rows(loss, x, owner);
  if (cfg.rho == 0) {
    for (double v : r.per_sample) r.value += v;
    r.value /= double(n);
    return r;
  }
  Rng rng = substream(cfg.seed, {0x0a11ce});
  for (std::size_t restart = 0; restart < cfg.restarts; ++restart) {
    Tensor<T> delta(x.shape(), T(0));
    if (restart > 0) {
      for (std::size_t i = 0; i < n; ++i) {
        std::span<T> row(delta.raw() + i * d, d);
        if (cfg.ball == BallNorm::linf) {
          for (auto& v : row) v = T(uniform(rng, -cfg.rho, cfg.rho));
        } else {
          double n2 = 0;
          for (auto& v : row) n2 += std::pow(double(v = T(normal(rng, 0, 1))), 2);
          const double radius = cfg.rho * std::pow(uniform(rng, 0, 1), 1.0 / double(d));
          for (auto& v : row) v = T(double(v) * radius / std::max(std::sqrt(n2), 1e-300));
        }
      }
    }
    for (std::size_t it = 0; it <= cfg.steps; ++it) {
      Tensor<T> pt = x;
      for (std::size_t k = 0; k < pt.size(); ++k) pt[k] += delta[k];
      const Var<T> xin = Var<T>::leaf(pt, true);
      const Var<T> l = loss(xin, owner);
      for (std::size_t i = 0; i < n; ++i) r.per_sample[i] = std::max(r.per_sample[i], double(l.value()[i]));
      if (it == cfg.steps) break;
      const Tensor<T> g = grad(sum(l), {xin})[0].value();
      for (std::size_t i = 0; i < n; ++i) {
        std::span<T> row(delta.raw() + i * d, d);
        const T* gr = g.raw() + i * d;
        if (cfg.ball == BallNorm::linf) {
          for (std::size_t k = 0; k < d; ++k) row[k] += T(step) * T((gr[k] > 0) - (gr[k] < 0));
        } else {
          double n2 = 0;
          for (std::size_t k = 0; k < d; ++k) n2 += double(gr[k]) * double(gr[k]);
          if (n2 == 0) continue;
          const double s = step / std::sqrt(n2);
          for (std::size_t k = 0; k < d; ++k) row[k] += T(double(gr[k]) * s);
        }
        project(row, cfg.ball, cfg.rho);
      }
    }
  }
  for (double v : r.per_sample) r.value += v;
  r.value /= double(n);
  return r;
}

}  // namespace detail

/// (1/N) sum_i max_{||delta_i|| <= rho} loss_i(x_i + delta_i), by exhaustive
/// grid (inputs of dimension <= 3) or projected gradient ascent with restarts.
/// The ascent result is a lower bound on the true maximum.
template <class T>
OracleResult brute_force_wdro(const SampleLoss<T>& loss, const Tensor<T>& x, const WdroOracleConfig& cfg) {
  cfg.validate();
  return cfg.method == OracleMethod::grid ? detail::grid_oracle(loss, x, cfg)
                                          : detail::ascent_oracle(loss, x, cfg);
}

template <class T>
OracleResult brute_force_wdro(const Model<T>& model, const Batch<T>& b, const WdroOracleConfig& cfg) {
  return brute_force_wdro(model_sample_loss(model, b.labels), b.images, cfg);
}

// ---------------------------------------------------------------------------
// Approximation-gap study

struct GapRow {
  double rho = 0;
  double rn = 0;       // surrogate: mean loss + rho * mean dual-norm of input gradients
  double oracle = 0;   // brute-force robust risk
  double gap = 0;      // |oracle - rn|
  double slope_running = std::numeric_limits<double>::quiet_NaN();
};

struct GapStudy {
  std::vector<GapRow> rows;
  double slope = std::numeric_limits<double>::quiet_NaN();
};

/// Least-squares slope of log(gap) against log(rho); NaN with fewer than two positive gaps.
inline double log_log_slope(const std::vector<GapRow>& rows, std::size_t count) {
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = 0; i < count; ++i)
    if (rows[i].gap > 0 && rows[i].rho > 0) pts.emplace_back(std::log(rows[i].rho), std::log(rows[i].gap));
  if (pts.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  double mx = 0, my = 0;
  for (auto [a, b] : pts) mx += a, my += b;
  mx /= double(pts.size());
  my /= double(pts.size());
  double sxy = 0, sxx = 0;
  for (auto [a, b] : pts) sxy += (a - mx) * (b - my), sxx += (a - mx) * (a - mx);
  return sxx > 0 ? sxy / sxx : std::numeric_limits<double>::quiet_NaN();
}

/// For each rho compares the first-order surrogate (q = 1, dual norm of the ball)
/// with the brute-force oracle.
template <class T>
GapStudy approximation_gap_study(const SampleLoss<T>& loss, const Tensor<T>& x,
                                 const std::vector<double>& rhos, WdroOracleConfig oracle,
                                 double smooth_eps = 1e-12) {
  if (rhos.empty()) throw ConfigError("gap study needs at least one rho");
  const auto ig = per_sample_input_gradients(loss, x);
  const Var<T> norms = smoothed_row_norms(ig.grads, dual_norm(oracle.ball), smooth_eps);
  double mean_loss = 0, mean_norm = 0;
  for (T v : ig.losses.value().data()) mean_loss += double(v);
  for (T v : norms.value().data()) mean_norm += double(v);
  mean_loss /= double(x.dim(0));
  mean_norm /= double(x.dim(0));

  GapStudy s;
  for (double rho : rhos) {
    if (!(rho > 0)) throw ConfigError("gap study rho values must be > 0");
    oracle.rho = rho;
    GapRow row;
    row.rho = rho;
    row.rn = mean_loss + rho * mean_norm;
    row.oracle = brute_force_wdro(loss, x, oracle).value;
    row.gap = std::abs(row.oracle - row.rn);
    s.rows.push_back(row);
    s.rows.back().slope_running = log_log_slope(s.rows, s.rows.size());
  }
  s.slope = s.rows.back().slope_running;
  return s;
}

inline void write_gap_csv(const GapStudy& s, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "rho,Rn,Doracle,gap,slope_running\n";
  char buf[256];
  for (const auto& r : s.rows) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g\n", r.rho, r.rn, r.oracle, r.gap,
                  r.slope_running);
    os << buf;
  }
}

}  // namespace droaug
