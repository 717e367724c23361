#pragma once

// Synthetic records generated from known law parameters, shared by the
// lawfit tests, the CLI tests and the acceptance suite.

#include <cmath>
#include <vector>

#include "compscale/lawfit.hpp"
#include "compscale/rng.hpp"

namespace compscale::fixture {

inline LawParams Params() { return {400.0, 0.3, 400.0, 0.3, 1.7}; }

inline const std::vector<double>& Sizes() {
  static const std::vector<double> sizes{1e5, 1e6, 1e7, 1e8};
  return sizes;
}

// Records at tokens = ratio * N. `noise` is the lognormal sigma.
inline std::vector<LawPoint> Points(const LawParams& p, double eff, const std::vector<double>& ratios,
                                    double noise = 0.0, std::uint64_t seed = 1) {
  const CounterRng rng(seed, 0);
  std::vector<LawPoint> out;
  std::uint64_t k = 0;
  for (double n : Sizes()) {
    for (double r : ratios) {
      double loss = p.a / std::pow(n * eff, p.b) + p.c / std::pow(r * n, p.d) + p.e;
      if (noise > 0.0) loss *= std::exp(noise * rng.normal(k++));
      out.push_back({n, r * n, loss, ""});
    }
  }
  return out;
}

// eff drifts with the data ratio, measured in multiples of the fitting ratio.
inline std::vector<LawPoint> DriftingPoints(const LawParams& p, double eff, double ratio, double multiple,
                                            const std::vector<double>& sizes) {
  const double drifted = eff * (1.0 + 0.2 * std::log(multiple));
  std::vector<LawPoint> out;
  for (double n : sizes) {
    const double d = ratio * multiple * n;
    out.push_back({n, d, p.a / std::pow(n * drifted, p.b) + p.c / std::pow(d, p.d) + p.e, ""});
  }
  return out;
}

}  // namespace compscale::fixture
