#include "safelearn/special_functions.h"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace safelearn {

namespace {

// Giles' single-precision approximation, good to ~1e-7 relative; used as the
// starting point for Newton polishing.
double erf_inv_initial(double y) {
  double w = -std::log((1.0 - y) * (1.0 + y));
  double p;
  if (w < 5.0) {
    w -= 2.5;
    p = 2.81022636e-08;
    p = 3.43273939e-07 + p * w;
    p = -3.5233877e-06 + p * w;
    p = -4.39150654e-06 + p * w;
    p = 0.00021858087 + p * w;
    p = -0.00125372503 + p * w;
    p = -0.00417768164 + p * w;
    p = 0.246640727 + p * w;
    p = 1.50140941 + p * w;
  } else {
    w = std::sqrt(w) - 3.0;
    p = -0.000200214257;
    p = 0.000100950558 + p * w;
    p = 0.00134934322 + p * w;
    p = -0.00367342844 + p * w;
    p = 0.00573950773 + p * w;
    p = -0.0076224613 + p * w;
    p = 0.00943887047 + p * w;
    p = 1.00167406 + p * w;
    p = 2.83297682 + p * w;
  }
  return p * y;
}

}  // namespace

double erf_inv(double y) {
  if (!(y > -1.0 && y < 1.0)) {
    if (y == 1.0) return INFINITY;
    if (y == -1.0) return -INFINITY;
    throw std::domain_error("erf_inv: argument outside [-1, 1]");
  }
  if (y == 0.0) return 0.0;
  const double sign = y < 0 ? -1.0 : 1.0;
  const double a = std::abs(y);
  double x = erf_inv_initial(a);
  const double two_over_sqrt_pi = 2.0 / std::sqrt(std::numbers::pi);
  for (int it = 0; it < 4; ++it) {
    // erf(x) - a, evaluated through erfc near 1 to avoid cancellation.
    const double r = a > 0.5 ? (1.0 - a) - std::erfc(x) : std::erf(x) - a;
    const double deriv = two_over_sqrt_pi * std::exp(-x * x);
    const double step = r / deriv;
    // Halley correction.
    x -= step / (1.0 + x * step);
    if (std::abs(step) < 1e-16 * std::max(1.0, std::abs(x))) break;
  }
  return sign * x;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw std::domain_error("normal_quantile: p outside (0, 1)");
  }
  return std::numbers::sqrt2 * erf_inv(2.0 * p - 1.0);
}

double interval_z(double p, int n_d) {
  if (!(p > 0.0 && p < 1.0)) {
    throw std::invalid_argument("interval_z: p must lie in (0, 1)");
  }
  if (n_d < 1) throw std::invalid_argument("interval_z: n_d must be >= 1");
  return std::numbers::sqrt2 * erf_inv(std::pow(p, 1.0 / n_d));
}

}  // namespace safelearn
