#include <doctest.h>

#include <cmath>
#include <initializer_list>

#include "safelearn/special_functions.h"

using namespace safelearn;

namespace {

// Maclaurin series of erf, accurate for |x| < 3 in double precision when
// summed until terms vanish.
double erf_series(double x) {
  double term = x, sum = x;
  for (int n = 1; n < 200; ++n) {
    term *= -x * x / n;
    const double add = term / (2 * n + 1);
    sum += add;
    if (std::abs(add) < 1e-18 * std::abs(sum)) break;
  }
  return 2.0 / std::sqrt(M_PI) * sum;
}

double erf_inv_bisect(double y) {
  double lo = -4.0, hi = 4.0;
  for (int k = 0; k < 200; ++k) {
    const double mid = 0.5 * (lo + hi);
    (erf_series(mid) < y ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

TEST_CASE("erf_inv against bisection on the series") {
  for (double y = -0.99; y <= 0.99; y += 0.0137)
    CHECK(std::abs(erf_inv(y) - erf_inv_bisect(y)) < 1e-11);
  CHECK(erf_inv(0.0) == 0.0);
}

TEST_CASE("erf_inv round trips near the tails") {
  for (double y : {0.999, 0.99999, 1 - 1e-9, 1 - 1e-12, -1 + 1e-10}) {
    const double x = erf_inv(y);
    CHECK(std::abs(std::erfc(std::abs(x)) - (1 - std::abs(y))) <
          1e-10 * (1 - std::abs(y)));
  }
  CHECK(std::isinf(erf_inv(1.0)));
  CHECK_THROWS(erf_inv(-1.5));
}

TEST_CASE("interval_z") {
  const double z95 = std::sqrt(2.0) * erf_inv_bisect(0.95);
  CHECK(interval_z(0.95) == doctest::Approx(z95).epsilon(1e-12));
  CHECK(interval_z(0.95) == doctest::Approx(1.959964).epsilon(1e-6));
  const double z2 = std::sqrt(2.0) * erf_inv_bisect(std::sqrt(0.95));
  CHECK(interval_z(0.95, 2) == doctest::Approx(z2).epsilon(1e-12));
  CHECK(interval_z(0.95, 2) == doctest::Approx(2.2365).epsilon(1e-4));
  CHECK_THROWS(interval_z(1.0));
  CHECK_THROWS(interval_z(0.0));
}

TEST_CASE("normal_cdf and quantile are inverses") {
  for (double p : {1e-8, 0.01, 0.3, 0.5, 0.77, 0.999})
    CHECK(normal_cdf(normal_quantile(p)) == doctest::Approx(p).epsilon(1e-12));
  CHECK(normal_cdf(0.0) == 0.5);
}
