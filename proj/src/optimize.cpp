#include "compscale/optimize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "compscale/errors.hpp"

namespace compscale {

namespace {

struct Simplex {
  std::vector<std::vector<double>> points;
  std::vector<double> values;
};

double safe(double v) { return std::isfinite(v) ? v : std::numeric_limits<double>::infinity(); }

}  // namespace

MinimizeResult nelder_mead(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x0,
                           const NelderMeadOptions& opt) {
  const std::size_t n = x0.size();
  if (n == 0) throw DomainError("nelder_mead: empty parameter vector");
  MinimizeResult best{x0, safe(f(x0)), 1};
  if (!std::isfinite(best.value)) throw FitError("nelder_mead: objective is not finite at the start point");

  for (std::size_t restart = 0; restart <= opt.max_restarts && best.evals < opt.max_evals; ++restart) {
    const double before = best.value;
    Simplex s;
    s.points.push_back(best.x);
    s.values.push_back(best.value);
    for (std::size_t i = 0; i < n; ++i) {
      auto p = best.x;
      p[i] += p[i] != 0.0 ? opt.initial_step * std::abs(p[i]) : opt.initial_step;
      s.points.push_back(p);
      s.values.push_back(safe(f(p)));
      ++best.evals;
    }
    std::vector<std::size_t> order(n + 1);
    while (best.evals < opt.max_evals) {
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.values[a] < s.values[b]; });
      const std::size_t lo = order.front(), hi = order.back(), second = order[n - 1];
      const double flo = s.values[lo], fhi = s.values[hi];
      if (std::isfinite(fhi) && fhi - flo <= opt.rel_tol * std::abs(flo) + opt.abs_tol) break;

      std::vector<double> centroid(n, 0.0);
      for (std::size_t k = 0; k <= n; ++k) {
        if (k == hi) continue;
        for (std::size_t i = 0; i < n; ++i) centroid[i] += s.points[k][i] / static_cast<double>(n);
      }
      auto along = [&](double t) {
        std::vector<double> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = centroid[i] + t * (s.points[hi][i] - centroid[i]);
        return p;
      };
      auto eval = [&](const std::vector<double>& p) {
        ++best.evals;
        return safe(f(p));
      };
      const auto reflected = along(-1.0);
      const double fr = eval(reflected);
      if (fr < flo) {
        const auto expanded = along(-2.0);
        const double fe = eval(expanded);
        if (fe < fr) {
          s.points[hi] = expanded;
          s.values[hi] = fe;
        } else {
          s.points[hi] = reflected;
          s.values[hi] = fr;
        }
        continue;
      }
      if (fr < s.values[second]) {
        s.points[hi] = reflected;
        s.values[hi] = fr;
        continue;
      }
      const bool outside = fr < fhi;
      const auto contracted = along(outside ? -0.5 : 0.5);
      const double fc = eval(contracted);
      if (fc < (outside ? fr : fhi)) {
        s.points[hi] = contracted;
        s.values[hi] = fc;
        continue;
      }
      // Shrink toward the best vertex.
      for (std::size_t k = 0; k <= n; ++k) {
        if (k == lo) continue;
        for (std::size_t i = 0; i < n; ++i) s.points[k][i] = s.points[lo][i] + 0.5 * (s.points[k][i] - s.points[lo][i]);
        s.values[k] = eval(s.points[k]);
      }
    }
    const auto arg = static_cast<std::size_t>(std::min_element(s.values.begin(), s.values.end()) - s.values.begin());
    if (s.values[arg] < best.value) {
      best.x = s.points[arg];
      best.value = s.values[arg];
    }
    if (before - best.value <= opt.rel_tol * std::abs(best.value) + opt.abs_tol) break;
  }
  return best;
}

MinimizeResult golden_section(const std::function<double(double)>& f, double lo, double hi, double tol) {
  if (!(lo < hi) || !(tol > 0.0)) throw DomainError("golden_section: need lo < hi and tol > 0");
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double x1 = b - inv_phi * (b - a), x2 = a + inv_phi * (b - a);
  double f1 = safe(f(x1)), f2 = safe(f(x2));
  std::size_t evals = 2;
  while (b - a > tol) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - inv_phi * (b - a);
      f1 = safe(f(x1));
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + inv_phi * (b - a);
      f2 = safe(f(x2));
    }
    ++evals;
  }
  const double x = 0.5 * (a + b);
  return {{x}, safe(f(x)), evals + 1};
}

}  // namespace compscale
