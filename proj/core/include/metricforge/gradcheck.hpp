#pragma once

#include <functional>

#include "metricforge/tensor.hpp"

namespace metricforge {

using ScalarFunction = std::function<Tensor(const Tensor&)>;

// Compares the reverse-mode gradient of f at x against central differences
// with step eps. Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
// Throws NumericError if f produces a non-finite value anywhere on the way.
double finite_diff_check(const ScalarFunction& f, const Tensor& x, double eps = 1e-5);

}  // namespace metricforge
