// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0

// droaug command-line pipeline: train, eval-clean, attack, corrupt, calibrate,
// verify-gap and report. Exit codes: 0 ok, 2 config error, 3 data error,
// 4 numeric abort, 1 anything else.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "droaug/droaug.hpp"

namespace fs = std::filesystem;
using namespace droaug;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string precision;
  std::string out = "out";
  std::string checkpoint;
  // train overrides
  std::optional<std::size_t> epochs, batch_size;
  std::optional<double> rho, lr_init;
  std::string model, augment;
  // attack / corrupt / calibrate / gap overrides
  std::vector<double> eps, rhos;
  std::optional<std::size_t> steps, samples;
  std::vector<std::string> kinds;
  std::string anchors, metrics;
};

RunConfig resolve_config(const Options& o) {
  RunConfig c = o.config.empty() ? parse_run_config(Json::object()) : load_run_config(o.config);
  if (o.seed) c.train.seed = *o.seed;
  if (!o.precision.empty()) c.precision = o.precision;
  if (!o.checkpoint.empty()) c.checkpoint = o.checkpoint;
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.batch_size) c.train.batch_size = *o.batch_size;
  if (o.rho) c.train.robust.rho = *o.rho;
  if (o.lr_init) c.train.lr_init = *o.lr_init;
  if (!o.model.empty()) c.train.model = o.model;
  if (!o.augment.empty()) c.train.augment = augment_from_string(o.augment);
  if (!o.eps.empty()) c.attack.eps = o.eps;
  if (o.steps) c.attack.steps = *o.steps;
  if (!o.rhos.empty()) c.gap.rhos = o.rhos;
  if (o.samples) c.gap.samples = *o.samples;
  if (!o.kinds.empty()) c.corrupt.kinds = c.calibrate.kinds = o.kinds;
  if (!o.anchors.empty()) c.calibrate.anchors = o.anchors, c.calibrate.custom_anchors.clear();
  if (c.precision != "f32" && c.precision != "f64") throw ConfigError("precision must be f32 or f64");
  c.train.validate();
  return c;
}

std::string default_data(const std::string& name) {
  return std::string(DROAUG_DEFAULT_DATA_DIR) + "/mnist-subset/" + name;
}

Dataset limit(Dataset d, std::size_t n) { return n == 0 || n >= d.size() ? d : d.slice(0, n); }

Dataset load_split(const DataConfig& d, bool train) {
  const std::string images = train ? d.train_images : d.test_images;
  const std::string labels = train ? d.train_labels : d.test_labels;
  const std::size_t n = train ? d.train_limit : d.test_limit;
  if (d.format == "idx") {
    return limit(load_idx(images.empty() ? default_data(train ? "train-images-idx3-ubyte.gz"
                                                              : "t5k-images-idx3-ubyte.gz")
                                         : images,
                          labels.empty() ? default_data(train ? "train-labels-idx1-ubyte.gz"
                                                              : "t5k-labels-idx1-ubyte.gz")
                                         : labels),
                 n);
  }
  if (d.format == "cifar10" || d.format == "cifar100") {
    if (images.empty()) throw ConfigError("data." + std::string(train ? "train" : "test") + "_images is required");
    return limit(load_cifar_binary(images, d.format == "cifar10" ? CifarVariant::cifar10 : CifarVariant::cifar100), n);
  }
  throw ConfigError("unknown data format '" + d.format + "'");
}

template <class T>
Model<T> require_checkpoint(const RunConfig& c) {
  if (c.checkpoint.empty()) throw ConfigError("a checkpoint is required (--checkpoint or config.checkpoint)");
  return load_checkpoint<T>(c.checkpoint);
}

MetricsReport existing_metrics(const fs::path& out) {
  const fs::path p = out / "metrics.csv";
  return fs::exists(p) ? parse_metrics_csv(read_text(p)) : MetricsReport{};
}

template <class T>
int cmd_train(const RunConfig& c, const fs::path& out) {
  const Dataset train_set = load_split(c.data, true);
  const Dataset test_set = load_split(c.data, false);
  TrainHooks<T> hooks;
  hooks.on_epoch = [](const EpochMetrics& e) {
    std::printf("epoch %zu  loss %.5f", e.epoch, e.train_loss);
    if (e.penalty) std::printf("  penalty %.5f", *e.penalty);
    if (e.test_accuracy) std::printf("  test_acc %.4f", *e.test_accuracy);
    std::printf("  (%.1fs)\n", e.seconds);
    std::fflush(stdout);
  };
  auto result = train<T>(c.train, train_set, &test_set, hooks);
  fs::create_directories(out);
  save_checkpoint(result.model, out / "checkpoint.droa");
  write_report(result.report, out);
  std::printf("clean accuracy %.4f; checkpoint %s\n", *result.report.clean_accuracy,
              (out / "checkpoint.droa").c_str());
  return 0;
}

template <class T>
int cmd_eval(const RunConfig& c, const fs::path& out) {
  const Model<T> model = require_checkpoint<T>(c);
  const Dataset test_set = load_split(c.data, false);
  MetricsReport r = existing_metrics(out);
  r.clean_accuracy = accuracy(model, test_set, c.train.eval_batch_size);
  write_report(r, out);
  std::printf("clean accuracy %.4f\n", *r.clean_accuracy);
  return 0;
}

template <class T>
int cmd_attack(const RunConfig& c, const fs::path& out) {
  const Model<T> model = require_checkpoint<T>(c);
  const Dataset test_set = load_split(c.data, false);
  MetricsReport r = existing_metrics(out);
  for (double eps : c.attack.eps) {
    AttackConfig ac;
    ac.eps = eps;
    ac.steps = c.attack.steps;
    ac.step_size = c.attack.step_size;
    ac.random_start = c.attack.random_start;
    ac.seed = c.train.seed;
    const double acc = robust_accuracy(model, test_set, ac, c.train.eval_batch_size);
    r.attacks.push_back({eps, c.attack.steps, acc});
    std::printf("eps %.6f steps %zu accuracy %.4f\n", eps, c.attack.steps, acc);
  }
  write_report(r, out);
  return 0;
}

std::vector<CorruptionKind> selected_kinds(const std::vector<std::string>& names) {
  if (names.empty()) return all_corruptions();
  std::vector<CorruptionKind> k;
  for (const auto& n : names) k.push_back(corruption_from_string(n));
  return k;
}

std::vector<CorruptionSpec> corruption_specs(const CorruptSection& s) {
  std::map<std::string, std::vector<double>> levels = s.intensities;
  if (!s.calibration.empty()) {
    const Json cal = Json::parse(read_text(s.calibration));
    for (const auto& [kind, rows] : cal.items()) {
      std::vector<double> t;
      for (const auto& row : rows) t.push_back(row.at("intensity").get<double>());
      levels.emplace(kind, t);
    }
  }
  std::vector<CorruptionSpec> specs;
  for (auto kind : selected_kinds(s.kinds)) {
    auto it = levels.find(to_string(kind));
    if (it == levels.end()) {
      throw ConfigError("no severity intensities for " + to_string(kind) +
                        " (set corruptions.intensities or corruptions.calibration)");
    }
    for (std::size_t i = 0; i < it->second.size(); ++i)
      specs.push_back(spec_from_intensity(kind, it->second[i], int(i + 1)));
  }
  return specs;
}

template <class T>
int cmd_corrupt(const RunConfig& c, const fs::path& out) {
  const Dataset test_set = load_split(c.data, false);
  const auto sets = build_corrupted_set(test_set, corruption_specs(c.corrupt), c.corrupt.seed);
  if (c.corrupt.write_sets)
    for (const auto& s : sets) write_corrupted_set(s, test_set, out / "corrupted");
  if (c.checkpoint.empty()) {
    std::printf("wrote %zu corrupted sets\n", sets.size());
    return 0;
  }
  const Model<T> model = require_checkpoint<T>(c);
  const auto rep = mean_corruption_accuracy(model, sets);
  MetricsReport r = existing_metrics(out);
  r.corruptions.clear();
  for (const auto& e : rep.entries) {
    r.corruptions.push_back({to_string(e.kind), e.severity, e.accuracy});
    std::printf("%-15s s%d accuracy %.4f\n", to_string(e.kind).c_str(), e.severity, e.accuracy);
  }
  std::printf("mean corruption accuracy %.4f\n", rep.mean_accuracy);
  write_report(r, out);
  return 0;
}

template <class T>
int cmd_calibrate(const RunConfig& c, const fs::path& out) {
  const Model<T> model = require_checkpoint<T>(c);
  const Dataset eval_set = limit(load_split(c.data, false), c.calibrate.eval_limit);
  const auto anchors = resolve_anchors(c.calibrate);
  Json doc = Json::object();
  for (auto kind : selected_kinds(c.calibrate.kinds)) {
    const auto levels = calibrate_levels(kind, anchors, model, eval_set, c.calibrate.seed, c.calibrate.tolerance,
                                         c.calibrate.max_evals, c.calibrate.hi);
    Json rows = Json::array();
    for (const auto& l : levels) {
      Json params = Json::object();
      for (const auto& [k, v] : l.spec.params) params[k] = v;
      rows.push_back({{"severity", l.spec.severity},
                      {"intensity", l.intensity},
                      {"params", params},
                      {"accuracy", l.accuracy},
                      {"target", anchors[std::size_t(l.spec.severity - 1)]},
                      {"evaluations", l.evaluations},
                      {"converged", l.converged}});
      std::printf("%-15s s%d intensity %.5f accuracy %.4f (target %.2f, %zu evals%s)\n", to_string(kind).c_str(),
                  l.spec.severity, l.intensity, l.accuracy, anchors[std::size_t(l.spec.severity - 1)],
                  l.evaluations, l.converged ? "" : ", not converged");
    }
    doc[to_string(kind)] = rows;
  }
  write_text(out / "calibration.json", doc.dump(2) + "\n");
  return 0;
}

template <class T>
int cmd_verify_gap(const RunConfig& c, const fs::path& out) {
  const Model<T> model = c.checkpoint.empty() ? build_model<T>(c.train.model, c.train.seed)
                                              : load_checkpoint<T>(c.checkpoint);
  const Dataset test_set = load_split(c.data, false);
  const Batch<T> b = make_batch<T>(test_set, 0, std::min(c.gap.samples, test_set.size()));
  WdroOracleConfig oc;
  oc.ball = ball_norm_from_string(c.gap.ball);
  if (c.gap.method == "grid") oc.method = OracleMethod::grid;
  else if (c.gap.method != "ascent") throw ConfigError("gap.method must be grid or ascent");
  oc.steps = c.gap.steps;
  oc.restarts = c.gap.restarts;
  oc.step_size = c.gap.step_size;
  oc.grid_points = c.gap.grid_points;
  oc.seed = c.train.seed;
  const auto study = approximation_gap_study<T>(model_sample_loss(model, b.labels), b.images, c.gap.rhos, oc,
                                                c.train.robust.smooth_eps);
  fs::create_directories(out);
  write_gap_csv(study, out / "gap.csv");
  for (const auto& r : study.rows)
    std::printf("rho %.4g  Rn %.8g  oracle %.8g  gap %.4g\n", r.rho, r.rn, r.oracle, r.gap);
  std::printf("log-log slope %.4f\n", study.slope);
  return 0;
}

int cmd_report(const Options& o, const fs::path& out) {
  const fs::path src = o.metrics.empty() ? out / "metrics.csv" : fs::path(o.metrics);
  if (!fs::exists(src)) throw IoError("no metrics file at " + src.string());
  const MetricsReport r = parse_metrics_csv(read_text(src));
  write_report(r, out);
  std::cout << summary_json(r).dump(2) << "\n";
  return 0;
}

template <class T>
int dispatch(const std::string& cmd, const RunConfig& c, const fs::path& out) {
  if (cmd == "train") return cmd_train<T>(c, out);
  if (cmd == "eval-clean") return cmd_eval<T>(c, out);
  if (cmd == "attack") return cmd_attack<T>(c, out);
  if (cmd == "corrupt") return cmd_corrupt<T>(c, out);
  if (cmd == "calibrate") return cmd_calibrate<T>(c, out);
  if (cmd == "verify-gap") return cmd_verify_gap<T>(c, out);
  throw ConfigError("unknown command " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributionally robust training with data augmentation"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--seed", o.seed, "Random seed");
  app.add_option("--precision", o.precision, "Floating point precision")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--out", o.out, "Output directory")->capture_default_str();

  auto add = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("--config", o.config, "JSON run configuration");
    return s;
  };
  auto* train_cmd = add("train", "Train a classifier and write checkpoint and metrics");
  train_cmd->add_option("--epochs", o.epochs);
  train_cmd->add_option("--batch-size", o.batch_size);
  train_cmd->add_option("--rho", o.rho, "Robustness radius (0 = plain ERM)");
  train_cmd->add_option("--lr", o.lr_init);
  train_cmd->add_option("--model", o.model, "Preset or layer list");
  train_cmd->add_option("--augment", o.augment)->check(CLI::IsMember({"none", "mixup", "augmix", "noisymix"}));
  auto* eval_cmd = add("eval-clean", "Clean test accuracy of a checkpoint");
  eval_cmd->add_option("--checkpoint", o.checkpoint);
  auto* attack_cmd = add("attack", "PGD robust accuracy of a checkpoint");
  attack_cmd->add_option("--checkpoint", o.checkpoint);
  attack_cmd->add_option("--eps", o.eps, "L-infinity budgets");
  attack_cmd->add_option("--steps", o.steps);
  auto* corrupt_cmd = add("corrupt", "Build corrupted test sets and optionally evaluate a checkpoint");
  corrupt_cmd->add_option("--checkpoint", o.checkpoint);
  corrupt_cmd->add_option("--kinds", o.kinds);
  auto* cal_cmd = add("calibrate", "Calibrate corruption severities to accuracy anchors");
  cal_cmd->add_option("--checkpoint", o.checkpoint);
  cal_cmd->add_option("--kinds", o.kinds);
  cal_cmd->add_option("--anchors", o.anchors)->check(CLI::IsMember({"c10-like", "c100-like"}));
  auto* gap_cmd = add("verify-gap", "Compare the surrogate with a brute-force robust risk");
  gap_cmd->add_option("--checkpoint", o.checkpoint);
  gap_cmd->add_option("--rhos", o.rhos);
  gap_cmd->add_option("--samples", o.samples);
  auto* report_cmd = add("report", "Re-render summary and charts from metrics.csv");
  report_cmd->add_option("--metrics", o.metrics, "Metrics CSV (default <out>/metrics.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  const fs::path out = o.out;
  try {
    if (cmd == "report") return cmd_report(o, out);
    const RunConfig c = resolve_config(o);
    return c.precision == "f64" ? dispatch<double>(cmd, c, out) : dispatch<float>(cmd, c, out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const IoError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric abort: %s\n", e.what());
    return 4;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
