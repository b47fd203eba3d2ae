// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>

#include "test_util.hpp"

using namespace droaug;
using namespace droaug::testing;
using TD = Tensor<double>;
using TF = Tensor<float>;

namespace {

std::vector<std::size_t> identity_perm(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  return p;
}

template <class T>
void expect_valid_batch(const Batch<T>& b) {
  for (T v : b.images.data()) {
    EXPECT_GE(v, T(0));
    EXPECT_LE(v, T(1));
  }
  const std::size_t k = b.labels.dim(1);
  for (std::size_t i = 0; i < b.size(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) {
      EXPECT_GE(b.labels[i * k + j], T(0));
      s += double(b.labels[i * k + j]);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

// Direct 64-bit evaluation of the batch-mean JSD with the same floor.
double jsd_oracle(const TD& a, const TD& b, const TD& c) {
  const std::size_t n = a.dim(0), k = a.dim(1);
  double total = 0;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t i = r * k + j;
      const double m = (a[i] + b[i] + c[i]) / 3;
      for (double p : {a[i], b[i], c[i]})
        total += p * (std::log(std::max(p, 1e-12)) - std::log(std::max(m, 1e-12)));
    }
  return total / (3.0 * double(n));
}

TF image_tensor(const Dataset& d, std::size_t i) {
  const auto px = d.image(i);
  return TF(d.sample_shape(), std::vector<float>(px.begin(), px.end()));
}

TD random_simplex_rows(std::size_t n, std::size_t k, Rng& rng) {
  TD t({n, k});
  for (std::size_t r = 0; r < n; ++r) {
    const auto w = sample_dirichlet(rng, k, 1.0);
    for (std::size_t j = 0; j < k; ++j) t[r * k + j] = w[j];
  }
  return t;
}

double jsd(const TD& a, const TD& b, const TD& c) {
  return jsd_loss(Var<double>::constant(a), Var<double>::constant(b), Var<double>::constant(c)).item();
}

}  // namespace

TEST(Mixup, LambdaOneIsIdentity) {
  Rng rng(1);
  const auto b = random_batch<double>(6, {1, 4, 4}, 10, rng);
  const auto out = mixup_with(b, 1.0, permutation(rng, 6));
  EXPECT_EQ(out.images, b.images);
  EXPECT_EQ(out.labels, b.labels);
}

TEST(Mixup, HalfLambdaAveragesImagesAndLabels) {
  Batch<double> b{TD({2, 1, 2, 2}), one_hot<double>(std::vector<int>{0, 1}, 2)};
  for (std::size_t i = 4; i < 8; ++i) b.images[i] = 1.0;
  const auto out = mixup_with(b, 0.5, {1, 0});
  for (double v : out.images.data()) EXPECT_EQ(v, 0.5);
  for (double v : out.labels.data()) EXPECT_EQ(v, 0.5);
}

TEST(Mixup, IdentityPermutationIsIdentityForAnyLambda) {
  Rng rng(2);
  const auto b = random_batch<float>(5, {1, 3, 3}, 4, rng);
  for (double lam : {0.0, 0.13, 0.5, 0.99}) {
    const auto out = mixup_with(b, lam, identity_perm(5));
    EXPECT_EQ(out.images, b.images);
    EXPECT_EQ(out.labels, b.labels);
  }
}

TEST(Mixup, UniformLambdaForUnitAlpha) {
  Rng rng(3);
  const auto b = random_batch<double>(2, {1, 1, 1}, 2, rng);
  std::vector<double> lams(10000);
  for (auto& l : lams) mixup(b, MixupConfig{1.0}, rng, &l);
  std::sort(lams.begin(), lams.end());
  double ks = 0;
  const double n = double(lams.size());
  for (std::size_t i = 0; i < lams.size(); ++i)
    ks = std::max({ks, std::abs(double(i + 1) / n - lams[i]), std::abs(double(i) / n - lams[i])});
  EXPECT_LT(ks, 0.02);
}

TEST(Mixup, PreservesRangesAndSimplex) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const auto b = random_batch<float>(8, {1, 5, 5}, 10, rng);
    const auto out = mixup(b, MixupConfig{0.4}, rng);
    EXPECT_EQ(out.images.shape(), b.images.shape());
    expect_valid_batch(out);
  }
}

TEST(Mixup, Errors) {
  Rng rng(5);
  const auto one = random_batch<double>(1, {1, 2, 2}, 2, rng);
  EXPECT_THROW(mixup(one, MixupConfig{}, rng), ShapeError);
  EXPECT_THROW(mixup(random_batch<double>(2, {1, 2, 2}, 2, rng), MixupConfig{0.0}, rng), ConfigError);
}

TEST(Mixup, BitReproducible) {
  Rng data_rng(6);
  const auto b = random_batch<float>(16, {1, 6, 6}, 10, data_rng);
  Rng r1 = substream(9, {2, 0, 0}), r2 = substream(9, {2, 0, 0});
  EXPECT_EQ(mixup(b, MixupConfig{}, r1).images, mixup(b, MixupConfig{}, r2).images);
}

TEST(Primitives, NeutralMagnitudesAreIdentity) {
  const Dataset d = mnist_train().slice(0, 3);
  const ImageGeom g{1, 28, 28};
  const std::vector<std::pair<Primitive, double>> neutral = {
      {Primitive::identity, 0},    {Primitive::translate_x, 0}, {Primitive::translate_y, 0},
      {Primitive::rotate, 0},      {Primitive::shear_x, 0},     {Primitive::shear_y, 0},
      {Primitive::contrast, 1},    {Primitive::brightness, 1},  {Primitive::posterize, 8}};
  for (std::size_t i = 0; i < d.size(); ++i) {
    const TF img = image_tensor(d, i);
    for (const auto& [p, mag] : neutral) {
      TF out(img.shape());
      apply_primitive(img.raw(), out.raw(), g, p, mag);
      EXPECT_EQ(out, img) << to_string(p);
    }
  }
}

TEST(Primitives, StayInRangeForRandomMagnitudes) {
  Rng rng(7);
  const ImageGeom g{3, 8, 8};
  for (int t = 0; t < 200; ++t) {
    const TD img = random_tensor<double>({3, 8, 8}, rng, 0, 1);
    for (Primitive p : all_primitives()) {
      TD out(img.shape());
      apply_primitive(img.raw(), out.raw(), g, p, sample_magnitude(p, g, rng));
      for (double v : out.data()) {
        ASSERT_GE(v, 0.0) << to_string(p);
        ASSERT_LE(v, 1.0) << to_string(p);
      }
    }
  }
}

TEST(Primitives, IntegerTranslateShiftsPixels) {
  const ImageGeom g{1, 3, 4};
  TD img({1, 3, 4});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = double(i) / 11;
  TD out(img.shape());
  apply_primitive(img.raw(), out.raw(), g, Primitive::translate_x, 1.0);
  for (std::size_t y = 0; y < 3; ++y) {
    EXPECT_EQ(out[y * 4], img[y * 4]);  // edge replicated
    for (std::size_t x = 1; x < 4; ++x) EXPECT_EQ(out[y * 4 + x], img[y * 4 + x - 1]);
  }
}

TEST(Primitives, NamesRoundTrip) {
  for (Primitive p : all_primitives()) EXPECT_EQ(primitive_from_string(to_string(p)), p);
  EXPECT_THROW(primitive_from_string("solarize"), ConfigError);
}

TEST(Augmix, ZeroSkipWeightIsIdentity) {
  const Dataset d = mnist_train().slice(0, 4);
  const ImageGeom g{1, 28, 28};
  Rng rng(8);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const TF img = image_tensor(d, i);
    TF out(img.shape());
    augmix_image(img.raw(), out.raw(), g, AugmixConfig{}, rng, 0.0);
    EXPECT_EQ(out, img);
  }
}

TEST(Augmix, SingleIdentityChainIsIdentityForAnyM) {
  AugmixConfig cfg;
  cfg.width = 1;
  cfg.primitives = {Primitive::identity};
  const Dataset d = mnist_train().slice(0, 4);
  const ImageGeom g{1, 28, 28};
  Rng rng(9);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const TF img = image_tensor(d, i);
    TF out(img.shape());
    augmix_image(img.raw(), out.raw(), g, cfg, rng);
    EXPECT_EQ(out, img);
    augmix_image(img.raw(), out.raw(), g, cfg, rng, 0.77);
    EXPECT_EQ(out, img);
  }
}

TEST(Augmix, FullSkipWeightWithSingleChainEqualsChain) {
  AugmixConfig cfg;
  cfg.width = 1;
  cfg.depth_min = cfg.depth_max = 1;
  cfg.primitives = {Primitive::brightness};
  const ImageGeom g{1, 2, 2};
  const TD img({1, 2, 2}, {0.1, 0.2, 0.3, 0.4});
  TD out(img.shape());
  Rng a(10), b(10);
  augmix_image(img.raw(), out.raw(), g, cfg, a, 1.0);
  // The skip weight is forced, so the stream is: Dirichlet draw, depth, primitive, magnitude.
  sample_dirichlet(b, 1, cfg.dirichlet_alpha);
  std::uniform_int_distribution<std::size_t>(1, 1)(b);
  std::uniform_int_distribution<std::size_t>(0, 0)(b);
  const double f = sample_magnitude(Primitive::brightness, g, b);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out[i], std::clamp(f * img[i], 0.0, 1.0), 1e-15);
}

TEST(Augmix, EmptyPrimitiveSetIsError) {
  AugmixConfig cfg;
  cfg.primitives.clear();
  EXPECT_THROW(augmix_batch(TD({1, 1, 2, 2}), cfg, 0, {0}), ConfigError);
}

TEST(Augmix, BatchIsReproducibleAndInRange) {
  const Batch<float> b = make_batch<float>(mnist_train(), 0, 8);
  const AugmixConfig cfg;
  const TF a = augmix_batch(b.images, cfg, 5, {3, 0, 0, 1});
  EXPECT_EQ(a, augmix_batch(b.images, cfg, 5, {3, 0, 0, 1}));
  EXPECT_NE(a, augmix_batch(b.images, cfg, 5, {3, 0, 0, 2}));
  EXPECT_EQ(a.shape(), b.images.shape());
  for (float v : a.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Jsd, IdenticalDistributionsGiveZero) {
  Rng rng(11);
  const TD p = random_simplex_rows(4, 5, rng);
  EXPECT_LE(jsd(p, p, p), 1e-12);
}

TEST(Jsd, DistinctOneHotsGiveLogThree) {
  const TD a({1, 3}, {1, 0, 0}), b({1, 3}, {0, 1, 0}), c({1, 3}, {0, 0, 1});
  EXPECT_NEAR(jsd(a, b, c), std::log(3.0), 1e-12);
  EXPECT_NEAR(jsd(a, b, c), 1.098612, 1e-6);
}

TEST(Jsd, TwoPointExampleMatchesDirectSum) {
  const TD a({1, 2}, {1, 0}), b({1, 2}, {0, 1}), c({1, 2}, {0.5, 0.5});
  EXPECT_NEAR(jsd(a, b, c), jsd_oracle(a, b, c), 1e-15);
  EXPECT_NEAR(jsd(a, b, c), 2 * std::numbers::ln2 / 3, 1e-15);
}

TEST(Jsd, RowsMustBeDistributions) {
  const TD ok({1, 2}, {0.5, 0.5}), bad({1, 2}, {0.5, 0.6}), neg({1, 2}, {1.5, -0.5});
  EXPECT_THROW(jsd(ok, ok, bad), DomainError);
  EXPECT_THROW(jsd(neg, ok, ok), DomainError);
  EXPECT_THROW(jsd(ok, ok, TD({1, 3}, 1.0 / 3)), ShapeError);
}

TEST(JsdProperty, BoundedSymmetricAndMatchesOracle) {
  Rng rng(12);
  for (int t = 0; t < 3000; ++t) {
    const std::size_t k = 2 + t % 9;
    const TD a = random_simplex_rows(2, k, rng), b = random_simplex_rows(2, k, rng),
             c = random_simplex_rows(2, k, rng);
    const double v = jsd(a, b, c);
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, std::log(3.0));
    ASSERT_NEAR(v, jsd_oracle(a, b, c), 1e-12);
    ASSERT_EQ(v, jsd(b, a, c));
    ASSERT_EQ(v, jsd(c, b, a));
    ASSERT_EQ(v, jsd(a, c, b));
    ASSERT_EQ(v, jsd(b, c, a));
    ASSERT_EQ(v, jsd(c, a, b));
  }
}

TEST(JsdProperty, GradientMatchesFiniteDifferences) {
  Rng rng(13);
  for (int t = 0; t < 20; ++t) {
    const TD a = random_simplex_rows(3, 4, rng), b = random_simplex_rows(3, 4, rng),
             c = random_simplex_rows(3, 4, rng);
    const auto va = Var<double>::leaf(a, true), vb = Var<double>::leaf(b, true);
    const auto g = grad(jsd_loss(va, vb, Var<double>::constant(c)), {va, vb});
    const TD fa = finite_difference_gradient<double>([&](const TD& p) { return jsd(p, b, c); }, a, 1e-7);
    const TD fb = finite_difference_gradient<double>([&](const TD& p) { return jsd(a, p, c); }, b, 1e-7);
    EXPECT_LE(relative_error(g[0].value(), fa, 1e-6), 1e-6);
    EXPECT_LE(relative_error(g[1].value(), fb, 1e-6), 1e-6);
  }
}

TEST(Noisymix, ZeroNoiseAndUnitLambdaIsIdentity) {
  Rng rng(14);
  const auto b = random_batch<float>(4, {1, 5, 5}, 10, rng);
  const auto mixed = mixup_with(b, 1.0, permutation(rng, 4));
  EXPECT_EQ(add_input_noise(mixed.images, 0.0, 0.0, rng), b.images);
  NoisymixConfig cfg;
  cfg.additive_std = cfg.multiplicative_std = 0;
  const auto nm = noisymix(b, cfg, rng);
  EXPECT_EQ(nm.noisy.images, nm.clean.images);
  EXPECT_EQ(nm.noisy.labels, nm.clean.labels);
}

TEST(Noisymix, AdditiveNoiseFollowsFoldedNormalMean) {
  Rng rng(15);
  const TD clean({20000}, 0.5);
  const TD out = add_input_noise(clean, 0.1, 0.0, rng);
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i] > 0 && out[i] < 1) s += std::abs(out[i] - clean[i]), ++n;
  const double expected = 0.1 * std::sqrt(2 / std::numbers::pi);
  const double sigma = 0.1 * std::sqrt(1 - 2 / std::numbers::pi) / std::sqrt(double(n));
  EXPECT_NEAR(expected, 0.0798, 1e-4);
  EXPECT_NEAR(s / double(n), expected, 3 * sigma);
}

TEST(Noisymix, ClampsToUnitInterval) {
  Rng rng(16);
  const TD ones({1000}, 1.0);
  const TD out = add_input_noise(ones, 5.0, 0.0, rng);
  std::size_t at_one = 0;
  for (double v : out.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    at_one += v == 1.0;
  }
  EXPECT_GT(at_one, 400u);
}

TEST(Noisymix, CleanBranchIsPlainMixupOnSameStream) {
  Rng data_rng(17);
  const auto b = random_batch<double>(6, {1, 3, 3}, 3, data_rng);
  Rng r1(99), r2(99);
  const auto nm = noisymix(b, NoisymixConfig{}, r1);
  const auto mx = mixup(b, MixupConfig{1.0}, r2);
  EXPECT_EQ(nm.clean.images, mx.images);
  EXPECT_EQ(nm.clean.labels, mx.labels);
  expect_valid_batch(nm.noisy);
}

TEST(Noisymix, StabilityKlIsZeroForEqualLogitsAndPositiveOtherwise) {
  const auto a = Var<double>::constant(TD({2, 3}, {0.1, 0.5, -1, 2, 0, 0}));
  const auto b = Var<double>::constant(TD({2, 3}, {0.3, 0.5, -1, 0, 0, 2}));
  EXPECT_NEAR(stability_kl(a, a).item(), 0.0, 1e-15);
  EXPECT_GT(stability_kl(a, b).item(), 0.0);
}

TEST(Noisymix, Reproducible) {
  Rng data_rng(18);
  const auto b = random_batch<float>(8, {1, 4, 4}, 10, data_rng);
  Rng r1(3), r2(3);
  EXPECT_EQ(noisymix(b, NoisymixConfig{}, r1).noisy.images, noisymix(b, NoisymixConfig{}, r2).noisy.images);
}
