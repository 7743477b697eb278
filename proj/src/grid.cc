#include "safelearn/grid.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace safelearn {

Grid2D::Grid2D(double x1_min, double x1_max, int n1, double x2_min,
               double x2_max, int n2)
    : x1_min_(x1_min),
      x1_max_(x1_max),
      n1_(n1),
      x2_min_(x2_min),
      x2_max_(x2_max),
      n2_(n2) {
  if (n1 < kMinNodes || n2 < kMinNodes) {
    throw std::invalid_argument("Grid2D: need at least 9 nodes per axis");
  }
  if (!(x1_max > x1_min) || !(x2_max > x2_min)) {
    throw std::invalid_argument("Grid2D: empty extent");
  }
  dx1_ = (x1_max - x1_min) / (n1 - 1);
  dx2_ = (x2_max - x2_min) / (n2 - 1);
}

Grid2D Grid2D::standard() { return Grid2D(-0.5, 3.3, 161, -3.0, 3.0, 161); }

bool Grid2D::contains(const State& x) const {
  return x.x1 >= x1_min_ && x.x1 <= x1_max_ && x.x2 >= x2_min_ &&
         x.x2 <= x2_max_;
}

State Grid2D::clamp(const State& x) const {
  return {std::clamp(x.x1, x1_min_, x1_max_),
          std::clamp(x.x2, x2_min_, x2_max_)};
}

Grid2D::CellCoords Grid2D::locate(const State& x) const {
  const double u = (x.x1 - x1_min_) / dx1_;
  const double v = (x.x2 - x2_min_) / dx2_;
  int i = std::clamp(static_cast<int>(std::floor(u)), 0, n1_ - 2);
  int j = std::clamp(static_cast<int>(std::floor(v)), 0, n2_ - 2);
  return {i, j, std::clamp(u - i, 0.0, 1.0), std::clamp(v - j, 0.0, 1.0)};
}

double Grid2D::interpolate(const std::vector<double>& field,
                           const State& x) const {
  const CellCoords c = locate(clamp(x));
  const double f00 = field[index(c.i, c.j)];
  const double f10 = field[index(c.i + 1, c.j)];
  const double f01 = field[index(c.i, c.j + 1)];
  const double f11 = field[index(c.i + 1, c.j + 1)];
  return (1 - c.s) * (1 - c.t) * f00 + c.s * (1 - c.t) * f10 +
         (1 - c.s) * c.t * f01 + c.s * c.t * f11;
}

bool Grid2D::operator==(const Grid2D& other) const {
  return x1_min_ == other.x1_min_ && x1_max_ == other.x1_max_ &&
         n1_ == other.n1_ && x2_min_ == other.x2_min_ &&
         x2_max_ == other.x2_max_ && n2_ == other.n2_;
}

}  // namespace safelearn
