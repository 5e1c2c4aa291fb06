#include "metricforge/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "metricforge/errors.hpp"

namespace metricforge {

namespace {

double evaluate(const ScalarFunction& f, const Tensor& x) {
  const double v = f(x).item();
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: function value is not finite");
  return v;
}

}  // namespace

double finite_diff_check(const ScalarFunction& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_check: eps must be positive");

  Tensor leaf = x.detach(true);
  Tensor loss = f(leaf);
  if (loss.numel() != 1) throw ContractError("finite_diff_check: function must return a scalar");
  if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: function value is not finite");
  loss.backward();
  const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());

  std::vector<double> probe(x.values().begin(), x.values().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double up = evaluate(f, Tensor(x.shape(), probe));
    probe[i] = saved - eps;
    const double down = evaluate(f, Tensor(x.shape(), probe));
    probe[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    if (!std::isfinite(analytic[i])) {
      throw NumericError("finite_diff_check: analytic gradient not finite at index " + std::to_string(i));
    }
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace metricforge
