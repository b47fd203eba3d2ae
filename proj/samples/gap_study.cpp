// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0

// Compares the first-order surrogate with a brute-force worst case on a toy
// quadratic loss and prints the log-log slope of the gap.

#include <cstdio>

#include "droaug/droaug.hpp"

int main() {
  using namespace droaug;
  using V = Var<double>;
  // l(x) = x^2 per sample; the worst case over |d| <= rho is (|x|+rho)^2.
  const SampleLoss<double> loss = [](const V& x, std::span<const std::size_t>) {
    return reshape(square(x), Shape{x.shape()[0]});
  };
  const Tensor<double> x({4, 1}, {0.5, -1.0, 0.25, 2.0});
  WdroOracleConfig oracle;
  oracle.method = OracleMethod::grid;
  const auto study = approximation_gap_study(loss, x, {0.001, 0.002, 0.004, 0.008, 0.016, 0.032, 0.064}, oracle);
  for (const auto& r : study.rows)
    std::printf("rho %.3f  Rn %.8f  oracle %.8f  gap %.3e\n", r.rho, r.rn, r.oracle, r.gap);
  std::printf("slope %.4f\n", study.slope);
}
