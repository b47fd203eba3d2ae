// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Strict JSON run configuration. Unknown keys and ill-typed values are ConfigErrors.

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "droaug/adversary.hpp"
#include "droaug/corruptions.hpp"
#include "droaug/errors.hpp"
#include "droaug/robust.hpp"
#include "droaug/train.hpp"

namespace droaug {

using Json = nlohmann::json;

/// Reads fields of one JSON object and rejects keys that were never read.
class JsonReader {
 public:
  JsonReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <class F>
  void object(const std::string& key, F&& f) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    JsonReader child(*it, where_ + "." + key);
    f(child);
    child.finish();
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline void read_robust(JsonReader& r, RobustLossConfig& c) {
  std::string norm = to_string(c.grad_norm);
  r.get("rho", c.rho);
  r.get("q", c.q);
  r.get("grad_norm", norm);
  r.get("smooth_eps", c.smooth_eps);
  c.grad_norm = grad_norm_from_string(norm);
}

inline void read_train(JsonReader& r, TrainConfig& c) {
  std::string augment = to_string(c.augment);
  r.get("model", c.model);
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("eval_batch_size", c.eval_batch_size);
  r.get("lr_init", c.lr_init);
  r.get("lr_min", c.lr_min);
  r.get("momentum", c.sgd.momentum);
  r.get("weight_decay", c.sgd.weight_decay);
  r.get("augment", augment);
  r.get("eval_each_epoch", c.eval_each_epoch);
  c.augment = augment_from_string(augment);
  r.object("mixup", [&](JsonReader& m) { m.get("alpha", c.mixup.alpha); });
  r.object("augmix", [&](JsonReader& m) {
    m.get("width", c.augmix.width);
    m.get("depth_min", c.augmix.depth_min);
    m.get("depth_max", c.augmix.depth_max);
    m.get("dirichlet_alpha", c.augmix.dirichlet_alpha);
    m.get("beta_alpha", c.augmix.beta_alpha);
    m.get("jsd_weight", c.augmix.jsd_weight);
    std::vector<std::string> names;
    m.get("primitives", names);
    if (m.has("primitives")) {
      c.augmix.primitives.clear();
      for (const auto& n : names) c.augmix.primitives.push_back(primitive_from_string(n));
    }
  });
  r.object("noisymix", [&](JsonReader& m) {
    m.get("mixup_alpha", c.noisymix.mixup_alpha);
    m.get("additive_std", c.noisymix.additive_std);
    m.get("multiplicative_std", c.noisymix.multiplicative_std);
    m.get("stability_weight", c.noisymix.stability_weight);
  });
  r.object("robust", [&](JsonReader& m) { read_robust(m, c.robust); });
}

struct DataConfig {
  std::string format = "idx";  // idx, cifar10, cifar100
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t train_limit = 0;  // 0 keeps every sample
  std::size_t test_limit = 0;
};

struct AttackSection {
  std::vector<double> eps{8.0 / 255.0};
  std::size_t steps = 20;
  double step_size = 0;
  bool random_start = false;
};

struct CorruptSection {
  std::vector<std::string> kinds;                       // empty selects every kind
  std::map<std::string, std::vector<double>> intensities;  // five per kind
  std::string calibration;                              // calibration.json from `calibrate`
  std::uint64_t seed = 0;
  bool write_sets = true;
};

struct CalibrateSection {
  std::vector<std::string> kinds{"gaussian_noise"};
  std::string anchors = "c10-like";
  std::vector<double> custom_anchors;
  double tolerance = 0.02;
  std::size_t max_evals = 20;
  std::size_t eval_limit = 1000;
  double hi = -1;
  std::uint64_t seed = 0;
};

struct GapSection {
  std::vector<double> rhos{0.001, 0.002, 0.004, 0.008, 0.016, 0.032, 0.064};
  std::size_t samples = 8;
  std::string ball = "l2";
  std::string method = "ascent";
  std::size_t steps = 100;
  std::size_t restarts = 20;
  double step_size = 0;
  std::size_t grid_points = 401;
};

struct RunConfig {
  TrainConfig train;
  DataConfig data;
  AttackSection attack;
  CorruptSection corrupt;
  CalibrateSection calibrate;
  GapSection gap;
  std::string checkpoint;
  std::string precision = "f32";
};

inline RunConfig parse_run_config(const Json& j) {
  RunConfig c;
  JsonReader r(j, "config");
  r.get("checkpoint", c.checkpoint);
  r.get("precision", c.precision);
  r.get("seed", c.train.seed);
  r.object("train", [&](JsonReader& t) { read_train(t, c.train); });
  r.object("data", [&](JsonReader& d) {
    d.get("format", c.data.format);
    d.get("train_images", c.data.train_images);
    d.get("train_labels", c.data.train_labels);
    d.get("test_images", c.data.test_images);
    d.get("test_labels", c.data.test_labels);
    d.get("train_limit", c.data.train_limit);
    d.get("test_limit", c.data.test_limit);
  });
  r.object("attack", [&](JsonReader& a) {
    a.get("eps", c.attack.eps);
    a.get("steps", c.attack.steps);
    a.get("step_size", c.attack.step_size);
    a.get("random_start", c.attack.random_start);
  });
  r.object("corruptions", [&](JsonReader& a) {
    a.get("kinds", c.corrupt.kinds);
    a.get("intensities", c.corrupt.intensities);
    a.get("calibration", c.corrupt.calibration);
    a.get("seed", c.corrupt.seed);
    a.get("write_sets", c.corrupt.write_sets);
  });
  r.object("calibration", [&](JsonReader& a) {
    if (a.has("anchors") && j.at("calibration").at("anchors").is_array()) {
      a.get("anchors", c.calibrate.custom_anchors);
    } else {
      a.get("anchors", c.calibrate.anchors);
    }
    a.get("kinds", c.calibrate.kinds);
    a.get("tolerance", c.calibrate.tolerance);
    a.get("max_evals", c.calibrate.max_evals);
    a.get("eval_limit", c.calibrate.eval_limit);
    a.get("hi", c.calibrate.hi);
    a.get("seed", c.calibrate.seed);
  });
  r.object("gap", [&](JsonReader& g) {
    g.get("rhos", c.gap.rhos);
    g.get("samples", c.gap.samples);
    g.get("ball", c.gap.ball);
    g.get("method", c.gap.method);
    g.get("steps", c.gap.steps);
    g.get("restarts", c.gap.restarts);
    g.get("step_size", c.gap.step_size);
    g.get("grid_points", c.gap.grid_points);
  });
  r.finish();
  if (c.precision != "f32" && c.precision != "f64") throw ConfigError("precision must be f32 or f64");
  c.train.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

inline std::array<double, 5> resolve_anchors(const CalibrateSection& c) {
  if (!c.custom_anchors.empty()) {
    if (c.custom_anchors.size() != 5) throw ConfigError("calibration anchors need exactly 5 values");
    return {c.custom_anchors[0], c.custom_anchors[1], c.custom_anchors[2], c.custom_anchors[3],
            c.custom_anchors[4]};
  }
  if (c.anchors == "c10-like") return anchors_c10_like();
  if (c.anchors == "c100-like") return anchors_c100_like();
  throw ConfigError("unknown anchor preset '" + c.anchors + "' (expected c10-like or c100-like)");
}

}  // namespace droaug
