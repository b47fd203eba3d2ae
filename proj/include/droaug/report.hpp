// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run metrics: long-format CSV (phase,metric,key,value), JSON summary and SVG charts.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "droaug/errors.hpp"

namespace droaug {

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0;
  std::optional<double> penalty;
  std::optional<double> test_accuracy;
  double seconds = 0;

  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

struct AttackMetrics {
  double eps = 0;
  std::size_t steps = 0;
  double accuracy = 0;

  friend bool operator==(const AttackMetrics&, const AttackMetrics&) = default;
};

struct CorruptionMetrics {
  std::string kind;
  int severity = 0;
  double accuracy = 0;

  friend bool operator==(const CorruptionMetrics&, const CorruptionMetrics&) = default;
};

struct MetricsReport {
  std::vector<EpochMetrics> epochs;
  std::optional<double> clean_accuracy;
  std::vector<AttackMetrics> attacks;
  std::vector<CorruptionMetrics> corruptions;

  std::optional<double> mean_corruption_accuracy() const {
    if (corruptions.empty()) return std::nullopt;
    double s = 0;
    for (const auto& c : corruptions) s += c.accuracy;
    return s / double(corruptions.size());
  }

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

namespace detail {
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw FormatError("metrics: bad number '" + s + "'");
  }
  if (used != s.size()) throw FormatError("metrics: bad number '" + s + "'");
  return v;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}
}  // namespace detail

inline std::string metrics_csv(const MetricsReport& r) {
  using detail::fmt_double;
  std::ostringstream os;
  os << "phase,metric,key,value\n";
  for (const auto& e : r.epochs) {
    const std::string k = std::to_string(e.epoch);
    os << "train,loss," << k << "," << fmt_double(e.train_loss) << "\n";
    if (e.penalty) os << "train,penalty," << k << "," << fmt_double(*e.penalty) << "\n";
    if (e.test_accuracy) os << "train,test_accuracy," << k << "," << fmt_double(*e.test_accuracy) << "\n";
    os << "train,seconds," << k << "," << fmt_double(e.seconds) << "\n";
  }
  if (r.clean_accuracy) os << "eval,clean_accuracy,," << fmt_double(*r.clean_accuracy) << "\n";
  for (const auto& a : r.attacks)
    os << "attack,accuracy,eps=" << fmt_double(a.eps) << ";steps=" << a.steps << ","
       << fmt_double(a.accuracy) << "\n";
  for (const auto& c : r.corruptions)
    os << "corruption,accuracy," << c.kind << "@" << c.severity << "," << fmt_double(c.accuracy) << "\n";
  if (auto m = r.mean_corruption_accuracy()) os << "corruption,mean_accuracy,," << fmt_double(*m) << "\n";
  return os.str();
}

inline MetricsReport parse_metrics_csv(const std::string& text) {
  MetricsReport r;
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "phase,metric,key,value") {
    throw FormatError("metrics: missing header 'phase,metric,key,value'");
  }
  auto epoch_entry = [&](std::size_t epoch) -> EpochMetrics& {
    for (auto& e : r.epochs)
      if (e.epoch == epoch) return e;
    r.epochs.push_back({});
    r.epochs.back().epoch = epoch;
    return r.epochs.back();
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 4) throw FormatError("metrics: expected 4 fields in '" + line + "'");
    const double v = detail::parse_double(f[3]);
    if (f[0] == "train") {
      EpochMetrics& e = epoch_entry(std::size_t(detail::parse_double(f[2])));
      if (f[1] == "loss") e.train_loss = v;
      else if (f[1] == "penalty") e.penalty = v;
      else if (f[1] == "test_accuracy") e.test_accuracy = v;
      else if (f[1] == "seconds") e.seconds = v;
      else throw FormatError("metrics: unknown train metric '" + f[1] + "'");
    } else if (f[0] == "eval" && f[1] == "clean_accuracy") {
      r.clean_accuracy = v;
    } else if (f[0] == "attack" && f[1] == "accuracy") {
      const auto parts = detail::split(f[2], ';');
      if (parts.size() != 2 || parts[0].rfind("eps=", 0) != 0 || parts[1].rfind("steps=", 0) != 0) {
        throw FormatError("metrics: bad attack key '" + f[2] + "'");
      }
      r.attacks.push_back({detail::parse_double(parts[0].substr(4)),
                           std::size_t(detail::parse_double(parts[1].substr(6))), v});
    } else if (f[0] == "corruption" && f[1] == "accuracy") {
      const auto at = f[2].find('@');
      if (at == std::string::npos) throw FormatError("metrics: bad corruption key '" + f[2] + "'");
      r.corruptions.push_back({f[2].substr(0, at), int(detail::parse_double(f[2].substr(at + 1))), v});
    } else if (f[0] == "corruption" && f[1] == "mean_accuracy") {
      continue;
    } else {
      throw FormatError("metrics: unknown row '" + line + "'");
    }
  }
  return r;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline nlohmann::json summary_json(const MetricsReport& r) {
  nlohmann::json j = nlohmann::json::object();
  j["epochs"] = r.epochs.size();
  if (!r.epochs.empty()) {
    const auto& last = r.epochs.back();
    j["final_train_loss"] = last.train_loss;
    if (last.penalty) j["final_penalty"] = *last.penalty;
    double secs = 0;
    for (const auto& e : r.epochs) secs += e.seconds;
    j["train_seconds"] = secs;
  }
  if (r.clean_accuracy) j["clean_accuracy"] = *r.clean_accuracy;
  auto attacks = nlohmann::json::array();
  for (const auto& a : r.attacks) attacks.push_back({{"eps", a.eps}, {"steps", a.steps}, {"accuracy", a.accuracy}});
  if (!attacks.empty()) j["attacks"] = attacks;
  if (auto m = r.mean_corruption_accuracy()) j["mean_corruption_accuracy"] = *m;
  return j;
}

/// Minimal line chart; each x value gets one tick marked class="xtick".
inline std::string svg_line_chart(const std::string& title, const std::string& xlabel,
                                  const std::string& ylabel, const std::vector<double>& xs,
                                  const std::vector<double>& ys) {
  const double w = 480, h = 320, l = 60, r = 20, t = 40, b = 50;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\">" << title << "</text>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  os << "<text x=\"15\" y=\"" << h / 2 << "\" transform=\"rotate(-90 15 " << h / 2
     << ")\" text-anchor=\"middle\">" << ylabel << "</text>\n";
  os << "<rect x=\"" << l << "\" y=\"" << t << "\" width=\"" << w - l - r << "\" height=\"" << h - t - b
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  if (!xs.empty() && xs.size() == ys.size()) {
    const auto [xmin_it, xmax_it] = std::minmax_element(xs.begin(), xs.end());
    double xmin = *xmin_it, xmax = *xmax_it;
    if (xmax == xmin) xmin -= 0.5, xmax += 0.5;
    auto px = [&](double x) { return l + (x - xmin) / (xmax - xmin) * (w - l - r); };
    auto py = [&](double y) { return h - b - std::clamp(y, 0.0, 1.0) * (h - t - b); };
    os << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? " " : "") << px(xs[i]) << "," << py(ys[i]);
    os << "\"/>\n";
    for (std::size_t i = 0; i < xs.size(); ++i) {
      os << "<g class=\"xtick\"><line x1=\"" << px(xs[i]) << "\" y1=\"" << h - b << "\" x2=\"" << px(xs[i])
         << "\" y2=\"" << h - b + 5 << "\" stroke=\"black\"/><text x=\"" << px(xs[i]) << "\" y=\""
         << h - b + 18 << "\" text-anchor=\"middle\" font-size=\"10\">" << detail::fmt_double(xs[i]).substr(0, 6)
         << "</text></g>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

/// Writes metrics.csv and summary.json into `dir`, plus accuracy_vs_epoch.svg and
/// accuracy_vs_eps.svg when the report has per-epoch accuracies or attack results.
inline void write_report(const MetricsReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "metrics.csv", metrics_csv(r));
  write_text(dir / "summary.json", summary_json(r).dump(2) + "\n");
  std::vector<double> ex, ey;
  for (const auto& e : r.epochs)
    if (e.test_accuracy) ex.push_back(double(e.epoch)), ey.push_back(*e.test_accuracy);
  if (!ex.empty())
    write_text(dir / "accuracy_vs_epoch.svg", svg_line_chart("Test accuracy", "epoch", "accuracy", ex, ey));
  std::vector<double> ax, ay;
  for (const auto& a : r.attacks) ax.push_back(a.eps), ay.push_back(a.accuracy);
  if (!ax.empty())
    write_text(dir / "accuracy_vs_eps.svg", svg_line_chart("PGD accuracy", "epsilon", "accuracy", ax, ay));
}

}  // namespace droaug
