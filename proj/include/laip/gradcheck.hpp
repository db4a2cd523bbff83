#pragma once

#include <functional>

#include "laip/autodiff.hpp"

namespace laip {

using ScalarFn = std::function<ad::Var(const ad::Var&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double autodiff_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// Compares the autodiff gradient of f at x with central differences
// D(h) = (f(x + h e_i) - f(x - h e_i)) / 2h, element by element, using the
// extrapolated estimate (4 D(eps/2) - D(eps)) / 3. Relative error uses the
// denominator max(|a|, |b|, 1e-8).
GradCheckResult finite_diff_check_detailed(const ScalarFn& f, const Tensor& x, double eps);
double finite_diff_check(const ScalarFn& f, const Tensor& x, double eps);

}  // namespace laip
