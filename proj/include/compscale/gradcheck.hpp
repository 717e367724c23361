#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "compscale/errors.hpp"
#include "compscale/tape.hpp"
#include "compscale/tensor.hpp"

namespace compscale {

// Compares reverse-mode gradients of a scalar function against central
// differences at `points`. `fn(tape, vars)` must build the function on the
// tape from leaves `vars` (one per point) and return a scalar Var.
// Returns max over coordinates of |analytic - numeric| /
// (|analytic| + |numeric| + 1e-12).
template <typename Fn>
double gradient_check(Fn&& fn, const std::vector<Tensor<double>>& points, double step) {
  if (!(step > 0.0)) throw DomainError("gradient_check: step must be positive");

  auto evaluate = [&](const std::vector<Tensor<double>>& at) {
    Tape<double> tape;
    std::vector<Var> vars;
    vars.reserve(at.size());
    for (const auto& p : at) vars.push_back(tape.constant(p));
    const double value = tape.value(fn(tape, std::span<const Var>(vars)))[0];
    if (!std::isfinite(value)) throw NumericError("gradient_check: non-finite function value");
    return value;
  };

  Tape<double> tape;
  std::vector<Var> vars;
  vars.reserve(points.size());
  for (const auto& p : points) vars.push_back(tape.leaf(p));
  const Var out = fn(tape, std::span<const Var>(vars));
  tape.backward(out);

  std::vector<Tensor<double>> probe = points;
  double worst = 0.0;
  for (std::size_t t = 0; t < points.size(); ++t) {
    const Tensor<double>& analytic = tape.grad(vars[t]);
    for (std::size_t i = 0; i < points[t].size(); ++i) {
      const double x0 = points[t][i];
      probe[t][i] = x0 + step;
      const double up = evaluate(probe);
      probe[t][i] = x0 - step;
      const double down = evaluate(probe);
      probe[t][i] = x0;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[i];
      if (!std::isfinite(a)) throw NumericError("gradient_check: non-finite analytic gradient");
      worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12));
    }
  }
  return worst;
}

template <typename Fn>
double gradient_check(Fn&& fn, const Tensor<double>& point, double step) {
  return gradient_check(
      [&](Tape<double>& tape, std::span<const Var> vars) { return fn(tape, vars[0]); },
      std::vector<Tensor<double>>{point}, step);
}

}  // namespace compscale
