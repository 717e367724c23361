#pragma once

// Post-fit analytics: size gains, speedup counting, Pareto frontiers,
// equal-cost comparisons and CSV/SVG report emission.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "compscale/compress.hpp"
#include "compscale/lawfit.hpp"
#include "compscale/trainer.hpp"

namespace compscale {

inline constexpr int kBaselineBits = 16;

// eff * baseline_bits / weight_bits.
double size_gain(double eff, int weight_bits, int baseline_bits = kBaselineBits);

// eff / (1 - fraction); index storage is not charged.
double size_gain_sparse(double eff, double fraction);

enum class Counting { kLinear, kQuadratic };

Counting parse_counting(const std::string& text);
std::string to_string(Counting counting);

// Compute-cost reduction factor relative to 16-bit dense.
//   W = A = b:   linear 16/b, quadratic (16/b)^2
//   wXaY:        linear 16/max(X, Y), quadratic 256/(X Y)
//   weight-only: linear 16/X (memory-bound proxy), quadratic is a DomainError
//   aY only:     linear 1, quadratic 16/Y
//   sparsity s:  1/(1 - s) under both
// Sparse weights combined with activation quantization have no cost rule and
// raise DomainError.
double speedup(const CompressionSpec& spec, Counting counting);

// Both axes are maximized.
struct ParetoPoint {
  std::string spec;
  double efficiency = 0.0;  // effective parameters per unit compute, eff * speedup
  double quality = 0.0;     // eff
  bool dominated = false;

  friend bool operator==(const ParetoPoint&, const ParetoPoint&) = default;
};

// One point per spec with efficiency = eff * speedup and quality = eff.
// Specs whose speedup is undefined under `counting` are left out.
std::vector<ParetoPoint> pareto_points(const std::map<std::string, double>& epm, Counting counting);

// Every point with its dominated flag set, ordered by efficiency then spec.
std::vector<ParetoPoint> mark_dominated(std::vector<ParetoPoint> points);

// The non-dominated subset, ordered by efficiency then spec.
std::vector<ParetoPoint> pareto_frontier(const std::vector<ParetoPoint>& points);

struct EqualCostPair {
  double cost = 0.0;      // shared speedup factor
  std::string better;     // spec with the larger eff
  std::string worse;
  double better_eff = 0.0;
  double worse_eff = 0.0;
  double delta = 0.0;     // better_eff - worse_eff
};

// Pairs every two specs whose speedups agree to 1e-9 relative. Ordered by
// cost, then by spec names.
std::vector<EqualCostPair> compare_at_equal_cost(const std::map<std::string, double>& epm, Counting counting);

// Fit results the report draws on. Specs absent from `eff` (or every spec,
// when `params` is empty) are plotted raw with a warning row.
struct ReportFits {
  std::optional<LawParams> params;
  std::map<std::string, double> eff;
};

struct Report {
  std::string csv;
  std::string svg;
};

// CSV columns: spec,N,D,loss,predicted_loss,eff,residual (residual is
// log predicted - log observed). Warning rows start with '#'. The SVG is a
// log-log chart of loss against N with one solid polyline per (spec, ratio)
// and a dashed fitted curve for each fitted one.
Report emit_report(const std::vector<RunRecord>& records, const ReportFits& fits);

}  // namespace compscale
