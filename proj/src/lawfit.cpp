#include "compscale/lawfit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "compscale/json_util.hpp"
#include "compscale/optimize.hpp"

namespace compscale {

void LawParams::validate() const {
  const bool finite = std::isfinite(a) && std::isfinite(b) && std::isfinite(c) && std::isfinite(d) && std::isfinite(e);
  if (!finite || !(a > 0.0) || !(c > 0.0) || !(b > 0.0 && b < 2.0) || !(d > 0.0 && d < 2.0) || !(e >= 0.0)) {
    throw DomainError("law params need a, c > 0, b, d in (0, 2), e >= 0");
  }
}

void to_json(nlohmann::json& j, const LawParams& p) {
  j = nlohmann::json{{"a", p.a}, {"b", p.b}, {"c", p.c}, {"d", p.d}, {"e", p.e}};
}

void from_json(const nlohmann::json& j, LawParams& p) {
  reject_unknown_keys(j, {"a", "b", "c", "d", "e"}, "law params");
  try {
    p.a = j.at("a").get<double>();
    p.b = j.at("b").get<double>();
    p.c = j.at("c").get<double>();
    p.d = j.at("d").get<double>();
    p.e = j.at("e").get<double>();
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("law params: ") + ex.what());
  }
}

double huber(double r, double delta) {
  const double m = std::abs(r);
  return m <= delta ? 0.5 * r * r : delta * (m - 0.5 * delta);
}

namespace {

double unchecked_predict(const LawParams& p, double n, double d, double eff) {
  return p.a / std::pow(n * eff, p.b) + p.c / std::pow(d, p.d) + p.e;
}

}  // namespace

double predict_loss(const LawParams& p, double n, double d, double eff) {
  p.validate();
  if (!(n > 0.0) || !(d > 0.0) || !std::isfinite(n) || !std::isfinite(d)) {
    throw DomainError("predict_loss: N and D must be positive and finite");
  }
  if (!(eff > 0.0 && eff <= kEffUpper)) throw DomainError("predict_loss: eff must lie in (0, 1.25]");
  return unchecked_predict(p, n, d, eff);
}

std::vector<LawPoint> law_points(const std::vector<RunRecord>& records, const CompressionSpec& spec) {
  const std::string want = spec.to_string();
  std::vector<LawPoint> out;
  for (const auto& r : records) {
    if (r.diverged || !std::isfinite(r.final_loss)) continue;
    if (CompressionSpec::parse(r.spec).to_string() != want) continue;
    out.push_back({static_cast<double>(r.n_params), static_cast<double>(r.tokens), r.final_loss, r.digest});
  }
  return out;
}

double law_objective(const LawParams& p, const std::vector<LawPoint>& points, double eff) {
  double total = 0.0;
  for (const auto& pt : points) {
    total += huber(std::log(unchecked_predict(p, pt.n, pt.d, eff)) - std::log(pt.loss));
  }
  return total;
}

std::vector<Residual> residuals(const LawParams& p, const std::vector<LawPoint>& points, double eff) {
  std::vector<Residual> out;
  for (const auto& pt : points) {
    const double pred = unchecked_predict(p, pt.n, pt.d, eff);
    out.push_back({pt.n, pt.d, pt.loss, pred, std::log(pred) - std::log(pt.loss)});
  }
  return out;
}

namespace {

void require_positive_losses(const std::vector<LawPoint>& points) {
  for (const auto& pt : points) {
    if (!(pt.loss > 0.0) || !std::isfinite(pt.loss) || !(pt.n > 0.0) || !(pt.d > 0.0)) {
      throw FitError("law fit: records need positive finite N, D and loss");
    }
  }
}

std::vector<std::string> digest_list(const std::vector<LawPoint>& points) {
  std::vector<std::string> out;
  for (const auto& pt : points) {
    if (!pt.digest.empty()) out.push_back(pt.digest);
  }
  return out;
}

// Unconstrained coordinates: (log a, b, log c, d, log e).
std::vector<double> to_coords(const LawParams& p) {
  return {std::log(p.a), p.b, std::log(p.c), p.d, std::log(std::max(p.e, 1e-300))};
}

LawParams from_coords(const std::vector<double>& x) {
  return {std::exp(x[0]), x[1], std::exp(x[2]), x[3], std::exp(x[4])};
}

bool in_box(const LawParams& p) {
  return p.b > 0.0 && p.b < 2.0 && p.d > 0.0 && p.d < 2.0 && std::isfinite(p.a) && std::isfinite(p.c) &&
         std::isfinite(p.e) && p.a > 0.0 && p.c > 0.0;
}

}  // namespace

std::vector<LawParams> dense_fit_starts(const std::vector<LawPoint>& points) {
  require_positive_losses(points);
  double min_loss = std::numeric_limits<double>::infinity();
  for (const auto& pt : points) min_loss = std::min(min_loss, pt.loss);
  std::vector<LawParams> starts;
  for (int bi = 0; bi < 5; ++bi) {
    for (int di = 0; di < 5; ++di) {
      for (double ef : {0.5, 0.8, 0.95}) {
        const double b = 0.1 + 0.2 * bi, d = 0.1 + 0.2 * di, e = ef * min_loss;
        // Least squares for y = a x + c z with x = N^-b, z = D^-d, y = L - e.
        double sxx = 0, sxz = 0, szz = 0, sxy = 0, szy = 0, sy = 0, sx = 0, sz = 0;
        for (const auto& pt : points) {
          const double x = std::pow(pt.n, -b), z = std::pow(pt.d, -d), y = pt.loss - e;
          sxx += x * x;
          sxz += x * z;
          szz += z * z;
          sxy += x * y;
          szy += z * y;
          sy += y;
          sx += x;
          sz += z;
        }
        const double det = sxx * szz - sxz * sxz;
        double a = det != 0.0 ? (sxy * szz - szy * sxz) / det : 0.0;
        double c = det != 0.0 ? (szy * sxx - sxy * sxz) / det : 0.0;
        if (!(a > 0.0) || !(c > 0.0) || !std::isfinite(a) || !std::isfinite(c)) {
          // Split the mean excess evenly between the two terms.
          a = 0.5 * sy / sx;
          c = 0.5 * sy / sz;
        }
        starts.push_back({a, b, c, d, e});
      }
    }
  }
  return starts;
}

DenseFit fit_dense(const std::vector<LawPoint>& points) {
  if (points.size() < 5) throw FitError("fit_dense: need at least 5 records, got " + std::to_string(points.size()));
  require_positive_losses(points);
  std::set<double> ns, ds;
  for (const auto& pt : points) {
    ns.insert(pt.n);
    ds.insert(pt.d);
  }
  if (ns.size() < 3 || ds.size() < 2) {
    throw FitError("fit_dense: records must span at least 3 distinct N and 2 distinct D");
  }
  auto objective = [&](const std::vector<double>& x) {
    const LawParams p = from_coords(x);
    if (!in_box(p)) return std::numeric_limits<double>::infinity();
    return law_objective(p, points);
  };
  const auto starts = dense_fit_starts(points);
  DenseFit best;
  best.objective = std::numeric_limits<double>::infinity();
  bool found = false;
  for (const auto& start : starts) {
    MinimizeResult r;
    try {
      r = nelder_mead(objective, to_coords(start));
    } catch (const FitError&) {
      continue;
    }
    if (!std::isfinite(r.value)) continue;
    const LawParams p = from_coords(r.x);
    const double tie = 1e-12 * std::max(std::abs(best.objective), 1e-300);
    const bool better = r.value < best.objective - tie;
    const bool tied = std::abs(r.value - best.objective) <= tie && p.e < best.params.e;
    if (!found || better || tied) {
      best.params = p;
      best.objective = r.value;
      found = true;
    }
  }
  if (!found) throw FitError("fit_dense: every start diverged");
  best.starts = starts.size();
  best.residuals = residuals(best.params, points);
  best.digests = digest_list(points);
  return best;
}

EpmEstimate fit_epm(const std::vector<LawPoint>& points, const CompressionSpec& spec, const LawParams& dense) {
  dense.validate();
  EpmEstimate est;
  est.spec = spec.to_string();
  est.records = points.size();
  est.digests = digest_list(points);
  if (spec.is_dense()) {
    est.eff = 1.0;
    if (!points.empty()) {
      require_positive_losses(points);
      est.objective = law_objective(dense, points, 1.0);
      est.residuals = residuals(dense, points, 1.0);
    }
    return est;
  }
  if (points.size() < 3) {
    throw FitError("fit_epm: need at least 3 records for " + est.spec + ", got " + std::to_string(points.size()));
  }
  require_positive_losses(points);
  const auto r = golden_section([&](double eff) { return law_objective(dense, points, eff); }, kEffLower, kEffUpper, 1e-6);
  est.eff = std::min(r.x[0], kEffUpper);
  est.objective = r.value;
  est.at_upper_bound = kEffUpper - est.eff < 1e-5;
  est.residuals = residuals(dense, points, est.eff);
  return est;
}

IndependenceReport data_independence_check(const std::vector<LawPoint>& points, const LawParams& dense,
                                           const EpmEstimate& epm) {
  if (points.empty()) throw FitError("data independence check: no records");
  require_positive_losses(points);
  IndependenceReport report;
  report.spec = epm.spec;
  for (const auto& pt : points) {
    const double pred = predict_loss(dense, pt.n, pt.d, epm.eff);
    const double rel = std::abs(pred - pt.loss) / pt.loss;
    report.rows.push_back({pt.n, pt.d, pt.loss, pred, rel});
    report.max_relative_error = std::max(report.max_relative_error, rel);
  }
  return report;
}

IndependenceReport data_independence_check(const std::vector<RunRecord>& records, const LawParams& dense,
                                           const EpmEstimate& epm) {
  const std::string want = CompressionSpec::parse(epm.spec).to_string();
  for (const auto& r : records) {
    if (CompressionSpec::parse(r.spec).to_string() != want) {
      throw ConfigError("data independence check: record spec '" + r.spec + "' does not match estimate '" +
                        epm.spec + "'");
    }
  }
  return data_independence_check(law_points(records, CompressionSpec::parse(want)), dense, epm);
}

double optimal_data(double n, double eff, double ratio) {
  if (!(n > 0.0) || !(ratio > 0.0) || !(eff > 0.0 && eff <= kEffUpper)) {
    throw DomainError("optimal_data: need N > 0, ratio > 0 and eff in (0, 1.25]");
  }
  return ratio * n * eff;
}

Allocation compute_optimal_allocation(const LawParams& p, double eff, double flops) {
  p.validate();
  if (!(eff > 0.0 && eff <= kEffUpper)) throw DomainError("allocation: eff must lie in (0, 1.25]");
  if (!(flops > 6.0) || !std::isfinite(flops)) throw DomainError("allocation: FLOP budget must exceed 6");
  // N ranges over [1, F / 6] so that both N and D are at least 1.
  const double lo = 0.0, hi = std::log(flops / 6.0);
  auto loss_at = [&](double log_n) {
    const double n = std::exp(log_n);
    return unchecked_predict(p, n, flops / (6.0 * n), eff);
  };
  constexpr int kGrid = 512;
  std::vector<double> grid(kGrid + 1);
  for (int i = 0; i <= kGrid; ++i) grid[i] = loss_at(lo + (hi - lo) * i / kGrid);
  const auto arg = static_cast<int>(std::min_element(grid.begin(), grid.end()) - grid.begin());
  if (arg == 0 || arg == kGrid) throw FitError("allocation: minimum lies at the edge of the search range");
  int local_minima = 0;
  for (int i = 1; i < kGrid; ++i) {
    if (grid[i] < grid[i - 1] && grid[i] <= grid[i + 1]) ++local_minima;
  }
  if (local_minima != 1) throw FitError("allocation: objective is not unimodal in log N");
  const double step = (hi - lo) / kGrid;
  const auto r = golden_section(loss_at, lo + (arg - 1) * step, lo + (arg + 1) * step, 1e-12);
  const double n = std::exp(r.x[0]);
  return {n, flops / (6.0 * n), r.value};
}

JointFit joint_refit(const std::vector<LawPoint>& dense_points,
                     const std::map<std::string, std::vector<LawPoint>>& compressed, const DenseFit& dense,
                     const std::vector<EpmEstimate>& estimates) {
  std::vector<std::string> names;
  std::vector<double> x0 = to_coords(dense.params);
  for (const auto& est : estimates) {
    if (!compressed.count(est.spec) || CompressionSpec::parse(est.spec).is_dense()) continue;
    names.push_back(est.spec);
    x0.push_back(std::log(est.eff));
  }
  auto total = [&](const LawParams& p, const std::vector<double>& effs) {
    double sum = law_objective(p, dense_points);
    for (std::size_t k = 0; k < names.size(); ++k) sum += law_objective(p, compressed.at(names[k]), effs[k]);
    return sum;
  };
  auto split = [&](const std::vector<double>& x) {
    return std::vector<double>(x.begin() + 5, x.end());
  };
  auto objective = [&](const std::vector<double>& x) {
    const LawParams p = from_coords({x.begin(), x.begin() + 5});
    if (!in_box(p)) return std::numeric_limits<double>::infinity();
    auto effs = split(x);
    for (auto& v : effs) {
      v = std::exp(v);
      if (!(v >= kEffLower && v <= kEffUpper)) return std::numeric_limits<double>::infinity();
    }
    return total(p, effs);
  };
  JointFit out;
  out.two_stage_objective = objective(x0);
  const auto r = nelder_mead(objective, x0);
  out.params = from_coords({r.x.begin(), r.x.begin() + 5});
  out.objective = r.value;
  for (std::size_t k = 0; k < names.size(); ++k) out.eff[names[k]] = std::exp(r.x[5 + k]);
  return out;
}

void to_json(nlohmann::json& j, const Residual& r) {
  j = nlohmann::json{{"N", r.n}, {"D", r.d}, {"observed", r.observed}, {"predicted", r.predicted},
                     {"log_residual", r.log_residual}};
}

void to_json(nlohmann::json& j, const DenseFit& f) {
  j = nlohmann::json{{"params", f.params},         {"objective", f.objective}, {"starts", f.starts},
                     {"residuals", f.residuals},   {"records", f.digests}};
}

void to_json(nlohmann::json& j, const EpmEstimate& e) {
  j = nlohmann::json{{"spec", e.spec},           {"eff", e.eff},         {"objective", e.objective},
                     {"at_upper_bound", e.at_upper_bound}, {"n_records", e.records}, {"residuals", e.residuals},
                     {"records", e.digests}};
}

void from_json(const nlohmann::json& j, EpmEstimate& e) {
  try {
    e.spec = j.at("spec").get<std::string>();
    e.eff = j.at("eff").get<double>();
    e.objective = j.value("objective", 0.0);
    e.at_upper_bound = j.value("at_upper_bound", false);
    e.records = j.value("n_records", std::size_t{0});
    if (j.contains("records")) e.digests = j.at("records").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("epm estimate: ") + ex.what());
  }
}

void to_json(nlohmann::json& j, const IndependenceReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"N", row.n}, {"D", row.d}, {"observed", row.observed}, {"predicted", row.predicted},
                    {"relative_error", row.relative_error}});
  }
  j = nlohmann::json{{"spec", r.spec}, {"max_relative_error", r.max_relative_error}, {"rows", rows}};
}

void to_json(nlohmann::json& j, const Allocation& a) {
  j = nlohmann::json{{"N", a.n}, {"D", a.d}, {"loss", a.loss}};
}

void to_json(nlohmann::json& j, const JointFit& f) {
  j = nlohmann::json{{"params", f.params}, {"eff", f.eff}, {"objective", f.objective},
                     {"two_stage_objective", f.two_stage_objective}};
}

}  // namespace compscale
