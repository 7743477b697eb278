#pragma once

#include <cstddef>
#include <vector>

#include "safelearn/dynamics.h"

namespace safelearn {

/// Uniform node grid over [x1_min, x1_max] x [x2_min, x2_max]. Node fields are
/// stored row-major with x1 as the slow index: index(i, j) = i * n2 + j.
class Grid2D {
 public:
  /// WENO5 needs a 7-point stencil along each axis.
  static constexpr int kMinNodes = 9;

  Grid2D(double x1_min, double x1_max, int n1, double x2_min, double x2_max,
         int n2);

  /// 161 x 161 over [-0.5, 3.3] m x [-3, 3] m/s.
  static Grid2D standard();

  double x1_min() const { return x1_min_; }
  double x1_max() const { return x1_max_; }
  double x2_min() const { return x2_min_; }
  double x2_max() const { return x2_max_; }
  int n1() const { return n1_; }
  int n2() const { return n2_; }
  double dx1() const { return dx1_; }
  double dx2() const { return dx2_; }
  std::size_t size() const { return static_cast<std::size_t>(n1_) * n2_; }

  std::size_t index(int i, int j) const {
    return static_cast<std::size_t>(i) * n2_ + j;
  }
  double x1(int i) const { return x1_min_ + i * dx1_; }
  double x2(int j) const { return x2_min_ + j * dx2_; }
  State node(int i, int j) const { return {x1(i), x2(j)}; }

  bool contains(const State& x) const;
  /// Nearest point of the grid rectangle.
  State clamp(const State& x) const;

  /// Cell containing x and the local coordinates in [0,1]^2. x must lie in
  /// the grid extent.
  struct CellCoords {
    int i;
    int j;
    double s;  // along x1
    double t;  // along x2
  };
  CellCoords locate(const State& x) const;

  /// Bilinear interpolation of a node field at x (clamped to the extent).
  double interpolate(const std::vector<double>& field, const State& x) const;

  bool operator==(const Grid2D& other) const;

 private:
  double x1_min_, x1_max_;
  int n1_;
  double x2_min_, x2_max_;
  int n2_;
  double dx1_, dx2_;
};

}  // namespace safelearn
