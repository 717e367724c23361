#pragma once

// The compressed scaling law L(N, D, C) = a / (N eff)^b + c / D^d + e:
// evaluation, two-stage fitting (dense parameters, then one eff per spec),
// the data-independence check and compute-optimal budgets.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "compscale/trainer.hpp"
#include "json.hpp"

namespace compscale {

inline constexpr double kHuberDelta = 1e-3;
inline constexpr double kEffLower = 0.01;
inline constexpr double kEffUpper = 1.25;
inline constexpr double kChinchillaRatio = 20.0;

struct LawParams {
  double a = 0.0, b = 0.0, c = 0.0, d = 0.0, e = 0.0;

  // DomainError unless a, c > 0, b, d in (0, 2), e >= 0, all finite.
  void validate() const;
  friend bool operator==(const LawParams&, const LawParams&) = default;
};

void to_json(nlohmann::json& j, const LawParams& p);
void from_json(const nlohmann::json& j, LawParams& p);

// r^2 / 2 inside [-delta, delta], delta (|r| - delta / 2) outside.
double huber(double r, double delta = kHuberDelta);

// DomainError for N, D <= 0, eff outside (0, 1.25] or invalid params.
double predict_loss(const LawParams& p, double n, double d, double eff = 1.0);

// One observation for the fits.
struct LawPoint {
  double n = 0.0;
  double d = 0.0;
  double loss = 0.0;
  std::string digest;
};

// Non-diverged records of `spec` (canonical string comparison).
std::vector<LawPoint> law_points(const std::vector<RunRecord>& records, const CompressionSpec& spec);

// Sum of huber(log predicted - log observed).
double law_objective(const LawParams& p, const std::vector<LawPoint>& points, double eff = 1.0);

struct Residual {
  double n = 0.0, d = 0.0, observed = 0.0, predicted = 0.0, log_residual = 0.0;
};

std::vector<Residual> residuals(const LawParams& p, const std::vector<LawPoint>& points, double eff = 1.0);

struct DenseFit {
  LawParams params;
  double objective = 0.0;
  std::size_t starts = 0;
  std::vector<Residual> residuals;
  std::vector<std::string> digests;
};

// The 75 multi-start points: (b, d) on {0.1, 0.3, ..., 0.9}^2, e at
// {0.5, 0.8, 0.95} x the smallest loss, (a, c) by least squares on
// loss - e given the other three.
std::vector<LawParams> dense_fit_starts(const std::vector<LawPoint>& points);

// FitError for fewer than 5 points, fewer than 3 distinct N, fewer than 2
// distinct D, or when no start yields a finite fit.
DenseFit fit_dense(const std::vector<LawPoint>& points);

struct EpmEstimate {
  std::string spec;
  double eff = 1.0;
  double objective = 0.0;
  bool at_upper_bound = false;  // the fit ran into eff = 1.25
  std::size_t records = 0;
  std::vector<Residual> residuals;
  std::vector<std::string> digests;
};

// Golden-section search of the law objective over eff in [0.01, 1.25] with
// dense parameters frozen. A dense spec returns eff = 1 without fitting.
// FitError for fewer than 3 points of a compressed spec.
EpmEstimate fit_epm(const std::vector<LawPoint>& points, const CompressionSpec& spec, const LawParams& dense);

struct IndependenceRow {
  double n = 0.0, d = 0.0, observed = 0.0, predicted = 0.0, relative_error = 0.0;
};

struct IndependenceReport {
  std::string spec;
  double max_relative_error = 0.0;
  std::vector<IndependenceRow> rows;

  bool consistent(double tolerance) const { return max_relative_error <= tolerance; }
};

// Predicts each record with the frozen (params, eff) and reports relative
// deviations. FitError for no records, ConfigError if a record's spec
// differs from the estimate's.
IndependenceReport data_independence_check(const std::vector<RunRecord>& records, const LawParams& dense,
                                           const EpmEstimate& epm);
IndependenceReport data_independence_check(const std::vector<LawPoint>& points, const LawParams& dense,
                                           const EpmEstimate& epm);

// ratio * N * eff.
double optimal_data(double n, double eff, double ratio = kChinchillaRatio);

struct Allocation {
  double n = 0.0;
  double d = 0.0;
  double loss = 0.0;
};

// Minimizes predict_loss(p, N, F / (6 N), eff) over log N. FitError when a
// grid scan finds the objective non-unimodal or minimal at the range edge.
Allocation compute_optimal_allocation(const LawParams& p, double eff, double flops);

struct JointFit {
  LawParams params;
  std::map<std::string, double> eff;
  double objective = 0.0;
  double two_stage_objective = 0.0;
};

// Cross-check: refits the dense parameters and every eff together, starting
// from the two-stage solution.
JointFit joint_refit(const std::vector<LawPoint>& dense_points,
                     const std::map<std::string, std::vector<LawPoint>>& compressed, const DenseFit& dense,
                     const std::vector<EpmEstimate>& estimates);

void to_json(nlohmann::json& j, const Residual& r);
void to_json(nlohmann::json& j, const DenseFit& f);
void to_json(nlohmann::json& j, const EpmEstimate& e);
void from_json(const nlohmann::json& j, EpmEstimate& e);
void to_json(nlohmann::json& j, const IndependenceReport& r);
void to_json(nlohmann::json& j, const Allocation& a);
void to_json(nlohmann::json& j, const JointFit& f);

}  // namespace compscale
