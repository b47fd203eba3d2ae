// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "test_util.hpp"

using namespace droaug;
using namespace droaug::testing;
using V = Var<double>;
using TD = Tensor<double>;

namespace {

V leaf(Shape s, std::vector<double> v) { return V::leaf(TD(std::move(s), std::move(v)), true); }

// Central-difference gradient of a scalar graph builder, one input.
TD numeric_grad(const std::function<V(const V&)>& f, const TD& x, double h = 1e-5) {
  return finite_difference_gradient<double>(
      [&](const TD& p) {
        NoGradGuard ng;
        return f(V::constant(p)).item();
      },
      x, h);
}

}  // namespace

TEST(Forward, ElementwiseAddition) {
  const auto out = V::constant(TD({2}, {1, 2})) + V::constant(TD({2}, {3, 4}));
  EXPECT_EQ(out.value(), TD({2}, {4, 6}));
}

TEST(Forward, IdentityMatmul) {
  const auto out = matmul(V::constant(TD({2, 2}, {1, 0, 0, 1})), V::constant(TD({2, 1}, {5, 7})));
  EXPECT_EQ(out.value().vec(), (std::vector<double>{5, 7}));
}

TEST(Forward, Requ) {
  EXPECT_EQ(requ(V::constant(TD({3}, {-1, 0, 2}))).value().vec(), (std::vector<double>{0, 0, 4}));
}

TEST(Forward, ShapeMismatchThrows) {
  EXPECT_THROW(V::constant(TD({2})) + V::constant(TD({3})), ShapeError);
  EXPECT_THROW(matmul(V::constant(TD({2, 3})), V::constant(TD({2, 3}))), ShapeError);
}

TEST(Forward, NonFiniteIntermediateThrows) {
  EXPECT_THROW(log(V::constant(TD({1}, {0.0}))), NumericError);
  EXPECT_THROW(exp(V::constant(TD({1}, {1000.0}))), NumericError);
  EXPECT_THROW(V::leaf(TD({1}, {std::nan("")})), NumericError);
}

TEST(Forward, BroadcastingFollowsTrailingAxes) {
  const auto out = V::constant(TD({2, 3}, {1, 2, 3, 4, 5, 6})) + V::constant(TD({3}, {10, 20, 30}));
  EXPECT_EQ(out.value().vec(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
}

TEST(Grad, SumOfSquares) {
  const V x = leaf({3}, {1, 2, 3});
  EXPECT_EQ(grad(sum(square(x)), {x})[0].value().vec(), (std::vector<double>{2, 4, 6}));
}

TEST(Grad, RequDerivative) {
  const V a = leaf({}, {3});
  EXPECT_DOUBLE_EQ(grad(sum(requ(a)), {a})[0].item(), 6.0);
  const V b = leaf({}, {-3});
  EXPECT_DOUBLE_EQ(grad(sum(requ(b)), {b})[0].item(), 0.0);
}

TEST(Grad, RequIsContinuouslyDifferentiable) {
  const double eps = 1e-6;
  const V p = leaf({}, {eps}), m = leaf({}, {-eps});
  const double dp = grad(sum(requ(p)), {p})[0].item();
  const double dm = grad(sum(requ(m)), {m})[0].item();
  EXPECT_LE(std::abs(dp - dm), 1e-5);
}

TEST(Grad, ReluSubgradientAtZeroIsZero) {
  const V x = leaf({1}, {0.0});
  EXPECT_EQ(grad(sum(relu(x)), {x})[0].item(), 0.0);
}

TEST(Grad, NonScalarOutputThrows) {
  const V x = leaf({2}, {1, 2});
  EXPECT_THROW(grad(square(x), {x}), ShapeError);
}

TEST(Grad, WrtNotInGraphThrows) {
  const V x = leaf({2}, {1, 2});
  const V y = leaf({2}, {3, 4});
  EXPECT_THROW(grad(sum(x), {y}), Error);
  EXPECT_THROW(grad(sum(x), {V::constant(TD({2}))}), Error);
  EXPECT_EQ(grad(sum(x), {y}, false, true)[0].value(), TD({2}, 0.0));
}

TEST(Grad, SecondOrderOfQuartic) {
  const V x = leaf({4}, {-1.5, 0.3, 1.0, 2.0});
  const V g = grad(sum(power(x, 4.0)), {x}, true)[0];
  const V h = grad(sum(g), {x})[0];
  for (std::size_t i = 0; i < 4; ++i) {
    const double xi = x.value()[i];
    EXPECT_NEAR(h.value()[i], 12 * xi * xi, 1e-8);
  }
}

TEST(Grad, WithoutRetainGradientsAreConstants) {
  const V x = leaf({2}, {1, 2});
  const V g = grad(sum(power(x, 3.0)), {x})[0];
  EXPECT_FALSE(g.requires_grad());
}

TEST(Grad, PenaltyOfLinearSquareMatchesFiniteDifferences) {
  // ||d/dx (w.x)^2||_2 = 2|w.x| ||w||, differentiated in w.
  const TD x0({2}, {0.7, -0.2});
  auto penalty = [&](const V& w) {
    const V x = V::leaf(x0, true);
    const V s = sum(w * x);
    const V gx = grad(square(s), {x}, true)[0];
    return sqrt(sum(square(gx)));
  };
  const V w = leaf({2}, {3, 4});
  const TD analytic = grad(penalty(w), {w})[0].value();
  const TD numeric = finite_difference_gradient<double>(
      [&](const TD& p) { return penalty(V::leaf(p, true)).item(); }, w.value(), 1e-5);
  EXPECT_LE(relative_error(analytic, numeric), 1e-8);
}

TEST(Grad, ImToColAndColToImAreAdjoint) {
  Rng rng(5);
  const ConvGeom gm{2, 5, 4, 3, 2, 1};
  const TD x = random_tensor<double>({3, 2, 5, 4}, rng);
  const TD c = random_tensor<double>({3, gm.patch(), gm.positions()}, rng);
  const TD ax = im2col(V::constant(x), gm).value();
  const TD atc = col2im(V::constant(c), gm).value();
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < c.size(); ++i) lhs += ax[i] * c[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * atc[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Grad, DeterministicRepeatedEvaluation) {
  Rng rng(3);
  const TD a = random_tensor<double>({4, 5}, rng), b = random_tensor<double>({5, 3}, rng);
  auto run = [&] {
    const V va = V::leaf(a, true);
    const V out = sum(log_softmax(matmul(va, V::constant(b))));
    return std::make_pair(out.value(), grad(out, {va})[0].value());
  };
  EXPECT_EQ(run(), run());
}

// Random expression graphs built from every differentiable op, compared with
// central differences at 64-bit precision.
TEST(GradProperty, RandomGraphsMatchFiniteDifferences) {
  using Builder = std::function<V(const V&)>;
  Rng rng(2024);
  const std::vector<std::pair<std::string, Builder>> unary = {
      {"exp", [](const V& x) { return exp(scale(x, 0.5)); }},
      {"log", [](const V& x) { return log(add_scalar(square(x), 0.5)); }},
      {"sqrt", [](const V& x) { return sqrt(add_scalar(square(x), 0.1)); }},
      {"square", [](const V& x) { return square(x); }},
      {"power", [](const V& x) { return power(add_scalar(square(x), 1.0), 1.5); }},
      {"requ", [](const V& x) { return requ(x); }},
      {"relu", [](const V& x) { return relu(x); }},
      {"neg", [](const V& x) { return -x; }},
      {"div", [](const V& x) { return x / add_scalar(square(x), 1.0); }},
      {"log_softmax", [](const V& x) { return log_softmax(x); }},
      {"softmax", [](const V& x) { return softmax(x); }},
      {"max_last", [](const V& x) { return broadcast_to(max_last(x), x.shape()) * x; }},
      {"clamp_min", [](const V& x) { return clamp_min(x, -0.5); }},
      {"sum_last", [](const V& x) { return broadcast_to(sum_last(x), x.shape()) - x; }},
  };
  std::size_t cases = 0;
  for (std::size_t trial = 0; trial < 120; ++trial) {
    const std::size_t rows = 1 + trial % 3, cols = 2 + trial % 4;
    const TD x = random_tensor<double>({rows, cols}, rng);
    const TD w = random_tensor<double>({cols, cols}, rng);
    const TD bias = random_tensor<double>({cols}, rng);
    std::vector<std::size_t> ops;
    for (int k = 0; k < 3; ++k) ops.push_back(std::uniform_int_distribution<std::size_t>(0, unary.size() - 1)(rng));
    const Builder f = [&](const V& in) {
      V h = matmul(in, V::constant(w)) + V::constant(bias);
      for (auto o : ops) {
        const V bounded = h / add_scalar(square(h), 1.0);
        h = unary[o].second(scale(bounded, 3.0)) + bounded;
      }
      return mean(h * h);
    };
    const V xv = V::leaf(x, true);
    const TD analytic = grad(f(xv), {xv})[0].value();
    const TD numeric = numeric_grad(f, x, 1e-6);
    EXPECT_LE(relative_error(analytic, numeric, 1e-6), 1e-6)
        << "trial " << trial << " ops " << unary[ops[0]].first << "," << unary[ops[1]].first << ","
        << unary[ops[2]].first;
    ++cases;
  }
  EXPECT_GE(cases, 100u);
}

TEST(GradProperty, ConvolutionAndMatmulVariants) {
  Rng rng(17);
  const ConvGeom gm{2, 6, 5, 3, 2, 1};
  const TD x = random_tensor<double>({2, 2, 6, 5}, rng);
  const TD w = random_tensor<double>({3, gm.patch()}, rng);
  auto f = [&](const V& in) {
    const V cols = im2col(in, gm);
    const V y = matmul(V::constant(w), cols);
    const V z = matmul(y, y, false, true);
    return mean(square(col2im(im2col(in, gm), gm))) + mean(z);
  };
  const V xv = V::leaf(x, true);
  EXPECT_LE(relative_error(grad(f(xv), {xv})[0].value(), numeric_grad(f, x)), 1e-6);
}

TEST(FiniteDifference, QuadraticIsExact) {
  const TD g = finite_difference_gradient<double>([](const TD& p) { return p[0] * p[0]; }, TD({1}, {3.0}), 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-9);
}

TEST(FiniteDifference, LinearGivesOnes) {
  const TD g = finite_difference_gradient<double>(
      [](const TD& p) {
        double s = 0;
        for (double v : p.data()) s += v;
        return s;
      },
      TD({4}, {0.1, -3, 7, 2}), 1e-5);
  for (double v : g.data()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDifference, CrossEntropyInLabelWeights) {
  // d/dy_k of -sum y log p is -log p_k.
  const TD logits({1, 3}, {0.2, -1.0, 0.5});
  const TD y0({1, 3}, {0.2, 0.3, 0.5});
  const TD g = finite_difference_gradient<double>(
      [&](const TD& y) { return cross_entropy(V::constant(logits), V::constant(y)).item(); }, y0, 1e-5);
  const TD lp = log_softmax(V::constant(logits)).value();
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(g[k], -lp[k], 1e-9);
}

TEST(FiniteDifference, NonFiniteValueThrows) {
  EXPECT_THROW(finite_difference_gradient<double>([](const TD&) { return std::nan(""); }, TD({1}), 1e-5),
               NumericError);
  EXPECT_THROW(finite_difference_gradient<double>([](const TD& p) { return p[0]; }, TD({1}), 0.0), Error);
}
