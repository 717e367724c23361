#pragma once

// Derivative-free minimizers used by the law fits.

#include <cstddef>
#include <functional>
#include <vector>

namespace compscale {

struct NelderMeadOptions {
  double rel_tol = 1e-9;       // on the spread of simplex values
  double abs_tol = 1e-30;
  double initial_step = 0.1;   // relative to |x_i|, or absolute when x_i == 0
  std::size_t max_evals = 40000;
  std::size_t max_restarts = 20;  // rebuild the simplex at the best point until no gain
};

struct MinimizeResult {
  std::vector<double> x;
  double value = 0.0;
  std::size_t evals = 0;
};

// Non-finite objective values are treated as +inf, which is how callers
// express box constraints.
MinimizeResult nelder_mead(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x0,
                           const NelderMeadOptions& options = {});

// Minimizes a unimodal f on [lo, hi] until the bracket is narrower than tol.
MinimizeResult golden_section(const std::function<double(double)>& f, double lo, double hi, double tol);

}  // namespace compscale
