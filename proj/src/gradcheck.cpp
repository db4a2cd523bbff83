#include "laip/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "laip/errors.hpp"

namespace laip {

GradCheckResult finite_diff_check_detailed(const ScalarFn& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_check: eps must be positive");
  auto leaf = ad::Var::leaf(x, "x");
  auto out = f(leaf);
  Tensor analytic = Tensor::zeros_like(x);
  if (out.tracked()) {
    ad::backward(out);
    analytic = leaf.grad();
  }

  GradCheckResult res;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    auto central = [&](double h) {
      probe[i] = orig + h;
      const double fp = f(ad::Var::constant(probe)).value().item();
      probe[i] = orig - h;
      const double fm = f(ad::Var::constant(probe)).value().item();
      probe[i] = orig;
      return (fp - fm) / (2.0 * h);
    };
    // Richardson step: cancels the O(h^2) term of the central difference.
    const double numeric = (4.0 * central(0.5 * eps) - central(eps)) / 3.0;
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = i;
      res.autodiff_at_worst = a;
      res.numeric_at_worst = numeric;
    }
  }
  return res;
}

double finite_diff_check(const ScalarFn& f, const Tensor& x, double eps) {
  return finite_diff_check_detailed(f, x, eps).max_rel_error;
}

}  // namespace laip
