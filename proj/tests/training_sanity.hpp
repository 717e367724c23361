#pragma once

// Desk-scale training sanity protocol: a fixed-ratio sweep over sizes and
// bit-widths, a dense fit, and the four ordering properties checked on it.
// The acceptance suite runs it on the real presets; the integration test runs
// it on tiny models.

#include <chrono>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "compscale/lawfit.hpp"
#include "compscale/trainer.hpp"

namespace compscale::sanity {

// Bit-width order used by the monotonicity check, narrowest first.
inline const std::vector<std::string>& Specs() {
  static const std::vector<std::string> specs{"w1", "w2", "w4", "w8", "dense"};
  return specs;
}

inline constexpr double kBitsNoise = 0.02;  // nats
inline constexpr double kEffCeiling = 1.05;

struct Check {
  bool pass = false;
  std::string detail;
};

struct Outcome {
  std::vector<RunRecord> records;  // ratio grid, every spec
  std::vector<RunRecord> extra;    // dense runs at half the ratio, for the fit
  std::map<std::string, double> eff;
  Check converged, dense_monotone, bits_monotone, eff_order;
  std::vector<std::string> failures;  // cells that threw
  double seconds = 0.0;
};

inline Outcome Run(const std::vector<SizePreset>& sizes, double ratio, const TrainConfig& base,
                   const TokenStream& stream, std::size_t jobs) {
  const auto started = std::chrono::steady_clock::now();
  Outcome out;
  std::vector<CompressionSpec> specs;
  for (const auto& s : Specs()) specs.push_back(CompressionSpec::parse(s));
  SweepOptions options;
  options.jobs = jobs;
  auto main = chinchilla_sweep(sizes, ratio, specs, base, stream, options);
  auto half = chinchilla_sweep(sizes, ratio / 2, {CompressionSpec::dense()}, base, stream, options);
  out.records = main.records;
  out.extra = half.records;
  for (const auto& f : main.failures) out.failures.push_back(f.cell + ": " + f.error);
  for (const auto& f : half.failures) out.failures.push_back(f.cell + ": " + f.error);

  auto loss_of = [&](const std::string& size, const std::string& spec) {
    const auto want = CompressionSpec::parse(spec).to_string();
    for (const auto& r : out.records) {
      if (r.model == find_preset(sizes, size).model && r.spec == want) return r.final_loss;
    }
    return std::numeric_limits<double>::infinity();
  };

  // (i) every run ends below its loss at initialization.
  {
    std::ostringstream os;
    std::size_t bad = 0;
    for (const auto& r : out.records) {
      if (r.diverged || r.curve.empty() || !(r.final_loss < r.curve.front().loss)) {
        ++bad;
        os << " " << r.spec << "@N=" << r.n_params;
      }
    }
    out.converged.pass = bad == 0 && out.failures.empty() && out.records.size() == sizes.size() * specs.size();
    out.converged.detail = std::to_string(out.records.size() - bad) + "/" +
                           std::to_string(sizes.size() * specs.size()) + " runs below init loss" + os.str();
  }
  // (ii) dense loss strictly decreases with N.
  {
    std::ostringstream os;
    bool ok = true;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      const double l = loss_of(sizes[i].name, "dense");
      os << (i ? " > " : "dense losses ") << l;
      if (i > 0 && !(l < loss_of(sizes[i - 1].name, "dense"))) ok = false;
    }
    out.dense_monotone = {ok, os.str()};
  }
  // (iii) at each size, more bits never cost more than the noise tolerance.
  {
    std::ostringstream os;
    bool ok = true;
    double worst = -std::numeric_limits<double>::infinity();
    for (const auto& size : sizes) {
      for (std::size_t k = 1; k < Specs().size(); ++k) {
        const double rise = loss_of(size.name, Specs()[k]) - loss_of(size.name, Specs()[k - 1]);
        worst = std::max(worst, rise);
        if (!(rise <= kBitsNoise)) {
          ok = false;
          os << " " << size.name << ":" << Specs()[k - 1] << "->" << Specs()[k] << " +" << rise;
        }
      }
    }
    out.bits_monotone = {ok, "largest loss increase with more bits " + std::to_string(worst) + " nats" + os.str()};
  }
  // (iv) eff(w1) < eff(w2) < eff(w4) <= 1.05.
  try {
    std::vector<RunRecord> dense = out.records;
    dense.insert(dense.end(), out.extra.begin(), out.extra.end());
    const auto fit = fit_dense(law_points(dense, CompressionSpec::dense()));
    for (const char* s : {"w1", "w2", "w4", "w8"}) {
      const auto spec = CompressionSpec::parse(s);
      out.eff[s] = fit_epm(law_points(out.records, spec), spec, fit.params).eff;
    }
    std::ostringstream os;
    os << "eff w1 " << out.eff["w1"] << ", w2 " << out.eff["w2"] << ", w4 " << out.eff["w4"] << ", w8 "
       << out.eff["w8"] << "; dense fit b=" << fit.params.b << " e=" << fit.params.e;
    out.eff_order = {out.eff["w1"] < out.eff["w2"] && out.eff["w2"] < out.eff["w4"] && out.eff["w4"] <= kEffCeiling,
                     os.str()};
  } catch (const Error& e) {
    out.eff_order = {false, std::string("fit failed: ") + e.what()};
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

}  // namespace compscale::sanity
