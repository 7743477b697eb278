#pragma once

namespace safelearn {

/// Inverse error function on (-1, 1). Absolute error below 1e-12 on
/// |y| <= 1 - 1e-12.
double erf_inv(double y);

/// Standard normal CDF.
double normal_cdf(double x);

/// Inverse standard normal CDF on (0, 1).
double normal_quantile(double p);

/// Half-width multiplier z = sqrt(2) erf^-1(p^(1/n_d)) so that a box of
/// +-z standard deviations per component holds probability mass p.
double interval_z(double p, int n_d = 1);

}  // namespace safelearn
