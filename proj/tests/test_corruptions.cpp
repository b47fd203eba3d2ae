// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "test_util.hpp"

using namespace droaug;
using namespace droaug::testing;
using TF = Tensor<float>;

namespace {

const ImageGeom kMnist{1, 28, 28};

std::vector<float> image_copy(const Dataset& d, std::size_t i) {
  const auto px = d.image(i);
  return {px.begin(), px.end()};
}

CorruptionSpec neutral_spec(CorruptionKind k) {
  CorruptionSpec s{k, {}, 0};
  switch (k) {
    case CorruptionKind::gaussian_noise: s.params["sigma"] = 0; break;
    case CorruptionKind::shot_noise: break;
    case CorruptionKind::impulse_noise: s.params["flip_prob"] = 0; break;
    case CorruptionKind::defocus_blur: s.params["kernel_radius"] = 0; break;
    case CorruptionKind::motion_blur: s.params = {{"length", 0}, {"angle", 30}}; break;
    case CorruptionKind::zoom_blur: s.params["max_zoom"] = 0; break;
    case CorruptionKind::contrast: s.params["contrast_factor"] = 1; break;
    case CorruptionKind::brightness: s.params["brightness_delta"] = 0; break;
    case CorruptionKind::pixelate: s.params["downscale_factor"] = 1; break;
  }
  return s;
}

// Intensity ladder per kind spanning mild to strong, used for the severity checks.
double ladder(CorruptionKind k, int severity) {
  const double f = double(severity) / 5;
  switch (k) {
    case CorruptionKind::gaussian_noise: return 0.6 * f;
    case CorruptionKind::shot_noise: return 2.0 * f;
    case CorruptionKind::impulse_noise: return 0.5 * f;
    case CorruptionKind::defocus_blur: return 3.0 * f;
    case CorruptionKind::motion_blur: return 10.0 * f;
    case CorruptionKind::zoom_blur: return 0.5 * f;
    case CorruptionKind::contrast: return 0.95 * f;
    case CorruptionKind::brightness: return 0.8 * f;
    case CorruptionKind::pixelate: return 3.0 * f;
  }
  return f;
}

const Model<float>& reference_model() {
  static const Model<float> m = [] {
    TrainConfig cfg;
    cfg.model = "mlp-small";
    cfg.epochs = 3;
    cfg.augment = AugmentKind::none;
    cfg.robust.rho = 0;
    cfg.eval_each_epoch = false;
    return train<float>(cfg, mnist_train().slice(0, 4000)).model;
  }();
  return m;
}

}  // namespace

TEST(Corrupt, NeutralParametersAreIdentity) {
  const Dataset d = mnist_test().slice(0, 5);
  for (CorruptionKind k : all_corruptions()) {
    const auto s = neutral_spec(k);
    EXPECT_TRUE(is_neutral(s)) << to_string(k);
    EXPECT_TRUE(is_neutral(spec_from_intensity(k, 0))) << to_string(k);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto in = image_copy(d, i);
      std::vector<float> out(in.size());
      Rng rng(i);
      corrupt_image(in.data(), out.data(), kMnist, s, rng);
      EXPECT_EQ(out, in) << to_string(k);
    }
  }
}

TEST(Corrupt, OutputsStayInRangeAndKeepShape) {
  const Dataset d = mnist_test().slice(0, 20);
  for (CorruptionKind k : all_corruptions()) {
    const Dataset c = corrupt_dataset(d, spec_from_intensity(k, ladder(k, 5), 5), 3);
    EXPECT_EQ(c.images.shape(), d.images.shape());
    EXPECT_EQ(c.labels, d.labels);
    for (float v : c.images.data()) {
      ASSERT_GE(v, 0.0f) << to_string(k);
      ASSERT_LE(v, 1.0f) << to_string(k);
    }
    EXPECT_NE(c.images, d.images) << to_string(k);
  }
}

TEST(Corrupt, ImpulseFlipFractionMatchesBinomial) {
  // Mid-grey pixels change under either flip outcome.
  const std::vector<float> in(784, 0.5f);
  const CorruptionSpec s{CorruptionKind::impulse_noise, {{"flip_prob", 0.25}}, 0};
  std::size_t changed = 0;
  const std::size_t trials = 100;
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<float> out(784);
    Rng rng = substream(42, {t});
    corrupt_image(in.data(), out.data(), kMnist, s, rng);
    for (std::size_t i = 0; i < 784; ++i) changed += out[i] != in[i];
  }
  const double n = double(trials * 784);
  const double sigma = std::sqrt(0.25 * 0.75 / n);
  EXPECT_NEAR(double(changed) / n, 0.25, 3 * sigma);
}

TEST(Corrupt, GaussianNoiseHasRequestedSpread) {
  const std::vector<float> in(784, 0.5f);
  std::vector<float> out(784);
  Rng rng(5);
  double s2 = 0;
  corrupt_image(in.data(), out.data(), kMnist, {CorruptionKind::gaussian_noise, {{"sigma", 0.05}}, 0}, rng);
  for (std::size_t i = 0; i < 784; ++i) s2 += std::pow(double(out[i]) - 0.5, 2);
  EXPECT_NEAR(std::sqrt(s2 / 784), 0.05, 0.005);
}

TEST(Corrupt, BlursPreserveConstantImages) {
  const ImageGeom g{3, 16, 12};
  const std::vector<float> in(g.size(), 0.37f);
  for (CorruptionKind k : {CorruptionKind::defocus_blur, CorruptionKind::motion_blur, CorruptionKind::zoom_blur,
                           CorruptionKind::pixelate}) {
    for (int sev = 1; sev <= 5; ++sev) {
      auto s = spec_from_intensity(k, std::min(max_intensity(k), ladder(k, sev) * 1.7));
      if (k == CorruptionKind::motion_blur) s.params["angle"] = 37.0 * sev;
      std::vector<float> out(g.size());
      Rng rng(0);
      corrupt_image(in.data(), out.data(), g, s, rng);
      for (float v : out) ASSERT_NEAR(v, 0.37f, 1e-6) << to_string(k) << " " << sev;
    }
  }
}

TEST(Corrupt, ContrastAndBrightnessFormulas) {
  const std::vector<float> in{0.0f, 0.25f, 0.5f, 1.0f};
  const ImageGeom g{1, 2, 2};
  std::vector<float> out(4);
  Rng rng(0);
  corrupt_image(in.data(), out.data(), g, {CorruptionKind::contrast, {{"contrast_factor", 0.5}}, 0}, rng);
  EXPECT_EQ(out, (std::vector<float>{0.25f, 0.375f, 0.5f, 0.75f}));
  corrupt_image(in.data(), out.data(), g, {CorruptionKind::brightness, {{"brightness_delta", 0.25}}, 0}, rng);
  EXPECT_EQ(out, (std::vector<float>{0.25f, 0.5f, 0.75f, 1.0f}));
}

TEST(Corrupt, RangeAndNameErrors) {
  EXPECT_THROW(validate({CorruptionKind::gaussian_noise, {{"sigma", -0.1}}, 0}), ConfigError);
  EXPECT_THROW(validate({CorruptionKind::impulse_noise, {{"flip_prob", 1.5}}, 0}), ConfigError);
  EXPECT_THROW(validate({CorruptionKind::contrast, {{"sigma", 0.5}}, 0}), ConfigError);
  EXPECT_THROW(validate({CorruptionKind::pixelate, {{"downscale_factor", 0.5}}, 0}), ConfigError);
  EXPECT_THROW(corruption_from_string("snow"), ConfigError);
  EXPECT_THROW(spec_from_intensity(CorruptionKind::gaussian_noise, -1), ConfigError);
  for (CorruptionKind k : all_corruptions()) EXPECT_EQ(corruption_from_string(to_string(k)), k);
}

TEST(CorruptedSets, NineKindsTimesFiveSeverities) {
  const Dataset d = mnist_test().slice(0, 1000);
  std::vector<CorruptionSpec> specs;
  for (CorruptionKind k : all_corruptions())
    for (int s = 1; s <= 5; ++s) specs.push_back(spec_from_intensity(k, ladder(k, s), s));
  const auto sets = build_corrupted_set(d, specs, 11);
  ASSERT_EQ(sets.size(), 45u);
  for (const auto& c : sets) EXPECT_EQ(c.data.size(), 1000u);
}

TEST(CorruptedSets, SeverityLowersReferenceAccuracy) {
  const Dataset d = mnist_test().slice(0, 1000);
  const double clean = accuracy(reference_model(), d);
  for (CorruptionKind k : all_corruptions()) {
    double prev = clean;
    for (int s = 1; s <= 5; ++s) {
      const double acc = accuracy(reference_model(), corrupt_dataset(d, spec_from_intensity(k, ladder(k, s), s), 7));
      EXPECT_LE(acc, prev + 0.01) << to_string(k) << " severity " << s;
      prev = acc;
    }
    EXPECT_LT(prev, clean) << to_string(k);
  }
}

TEST(CorruptedSets, IdentitySetsGiveCleanAccuracy) {
  const Dataset d = mnist_test().slice(0, 500);
  std::vector<CorruptionSpec> specs;
  for (CorruptionKind k : all_corruptions()) specs.push_back(neutral_spec(k));
  const auto report = mean_corruption_accuracy(reference_model(), build_corrupted_set(d, specs, 1));
  const double clean = accuracy(reference_model(), d);
  for (const auto& e : report.entries) EXPECT_EQ(e.accuracy, clean);
  EXPECT_NEAR(report.mean_accuracy, clean, 1e-15);
}

TEST(CorruptedSets, SingleSetMeanAndPerfectModel) {
  const Dataset d = mnist_test().slice(0, 300);
  auto sets = build_corrupted_set(d, {spec_from_intensity(CorruptionKind::gaussian_noise, 0.3, 2)}, 4);
  const auto single = mean_corruption_accuracy(reference_model(), sets);
  EXPECT_EQ(single.mean_accuracy, single.entries.at(0).accuracy);

  auto more = build_corrupted_set(d, {spec_from_intensity(CorruptionKind::defocus_blur, 1.0, 1),
                                      spec_from_intensity(CorruptionKind::pixelate, 2.0, 3)}, 4);
  sets.insert(sets.end(), more.begin(), more.end());
  for (auto& c : sets) {
    const auto pred = predict(reference_model(), c.data.images);
    c.data.labels = pred;  // relabel so the model is perfect on every set
  }
  EXPECT_EQ(mean_corruption_accuracy(reference_model(), sets).mean_accuracy, 1.0);
  EXPECT_THROW(mean_corruption_accuracy(reference_model(), {}), ConfigError);
}

TEST(CorruptedSets, ReproducibleFromSeedAndSpec) {
  const Dataset d = mnist_test().slice(0, 50);
  for (CorruptionKind k : all_corruptions()) {
    const auto s = spec_from_intensity(k, ladder(k, 3), 3);
    EXPECT_EQ(corrupt_dataset(d, s, 9).images, corrupt_dataset(d, s, 9).images) << to_string(k);
  }
  const auto s = spec_from_intensity(CorruptionKind::shot_noise, 1.0, 3);
  EXPECT_NE(corrupt_dataset(d, s, 9).images, corrupt_dataset(d, s, 10).images);
}

TEST(CorruptedSets, ManifestRegeneratesBitIdenticalFiles) {
  const Dataset d = mnist_test().slice(0, 200);
  const auto dir = temp_dir("manifest");
  for (CorruptionKind k : all_corruptions()) {
    auto spec = spec_from_intensity(k, ladder(k, 4), 4);
    if (k == CorruptionKind::motion_blur) spec.params["angle"] = 45;
    const CorruptedSet c{spec, 123, corrupt_dataset(d, spec, 123)};
    write_corrupted_set(c, d, dir);
    const std::string stem = corrupted_stem(spec);
    std::ifstream js(dir / (stem + ".json"));
    const auto manifest = nlohmann::json::parse(js);
    EXPECT_EQ(manifest.at("kind"), to_string(k));
    EXPECT_EQ(manifest.at("seed"), 123);
    EXPECT_EQ(manifest.at("source_digest"), dataset_digest(d));
    const Dataset again = regenerate_from_manifest(manifest, d);
    EXPECT_EQ(serialize_idx(images_to_idx(again)), read_file_bytes(dir / (stem + "-images-idx3-ubyte")));
    EXPECT_EQ(serialize_idx(labels_to_idx(again)), read_file_bytes(dir / (stem + "-labels-idx1-ubyte")));
  }
  std::ifstream js(dir / "gaussian_noise-s4.json");
  const auto manifest = nlohmann::json::parse(js);
  EXPECT_THROW(regenerate_from_manifest(manifest, mnist_test().slice(1, 200)), FormatError);
}

TEST(Bisection, SyntheticCurveConverges) {
  const AccuracyAt acc = [](double t) { return 1.0 - t; };
  const auto r = bisect_intensity(acc, 0.3, 0.0, 1.0);
  EXPECT_TRUE(r.converged);
  EXPECT_LE(std::abs(r.accuracy - 0.3), 0.02);
  EXPECT_LE(r.evaluations, 20u);
}

TEST(Bisection, EvaluationBudgetIncludesBrackets) {
  std::size_t calls = 0;
  const AccuracyAt acc = [&](double t) {
    ++calls;
    return 1.0 - t;
  };
  const auto r = bisect_intensity(acc, 1.0 / 3, 0.0, 1.0, 0.0, 20);
  EXPECT_EQ(calls, 20u);
  EXPECT_EQ(r.evaluations, 20u);
  EXPECT_FALSE(r.converged);
  EXPECT_NEAR(r.accuracy, 1.0 / 3, 1e-5);
}

TEST(Bisection, BracketViolationIsError) {
  const AccuracyAt acc = [](double t) { return 0.9 - 0.5 * t; };
  EXPECT_THROW(bisect_intensity(acc, 0.95, 0.0, 1.0), ConfigError);
  EXPECT_THROW(bisect_intensity(acc, 0.1, 0.0, 1.0), ConfigError);
  EXPECT_THROW(bisect_intensity(acc, 0.5, 1.0, 0.0), ConfigError);
}

TEST(Calibration, CleanTargetReturnsNeutralIntensity) {
  const Dataset d = mnist_test().slice(0, 1000);
  const double clean = accuracy(reference_model(), d);
  const auto r = calibrate_severity(CorruptionKind::gaussian_noise, clean, reference_model(), d, 0.0, 2.0, 0);
  EXPECT_EQ(r.intensity, 0.0);
  EXPECT_EQ(r.accuracy, clean);
  EXPECT_TRUE(is_neutral(r.spec));
}

TEST(Calibration, GaussianNoiseHitsTarget) {
  const Dataset d = mnist_test().slice(0, 1000);
  const auto r = calibrate_severity(CorruptionKind::gaussian_noise, 0.70, reference_model(), d, 0.0, 5.0, 0);
  EXPECT_TRUE(r.converged);
  EXPECT_LE(std::abs(r.accuracy - 0.70), 0.02);
  EXPECT_LE(r.evaluations, 20u);
  // The stored spec reproduces the reported accuracy.
  EXPECT_EQ(accuracy(reference_model(), corrupt_dataset(d, r.spec, 0)), r.accuracy);
}

TEST(Calibration, LevelSpecsReproduceReportedAccuracy) {
  const Dataset d = mnist_test().slice(0, 1000);
  const auto levels =
      calibrate_levels(CorruptionKind::gaussian_noise, anchors_c10_like(), reference_model(), d, 5);
  ASSERT_EQ(levels.size(), 5u);
  for (std::size_t s = 0; s < 5; ++s) {
    EXPECT_EQ(levels[s].spec.severity, int(s + 1));
    EXPECT_EQ(accuracy(reference_model(), corrupt_dataset(d, levels[s].spec, 5)), levels[s].accuracy) << s;
  }
}

TEST(Calibration, RequiresEnoughEvaluationSamples) {
  EXPECT_THROW(calibrate_severity(CorruptionKind::gaussian_noise, 0.5, reference_model(),
                                  mnist_test().slice(0, 999), 0.0, 1.0, 0),
               ConfigError);
}

TEST(Calibration, AnchorPresetsDecrease) {
  for (const auto* a : {&anchors_c10_like(), &anchors_c100_like()})
    for (std::size_t i = 1; i < a->size(); ++i) EXPECT_LT((*a)[i], (*a)[i - 1]);
  EXPECT_EQ(anchors_c100_like().front(), 0.60);
  EXPECT_EQ(anchors_c10_like().back(), 0.51);
}
