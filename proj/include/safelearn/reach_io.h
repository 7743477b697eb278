#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>

#include "safelearn/reach.h"

namespace safelearn {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary grid file: one JSON header line naming the grid, metadata and the
/// payload fields in order, then each field as n1*n2 little-endian float64
/// values in Grid2D::index order.
/// Fields: V, l, u_star, d_star, switching.
void write_value_grid(std::ostream& out, const ReachSolution& sol,
                      int version = 0);
ReachSolution read_value_grid(std::istream& in, int* version = nullptr);

/// Gridded bound file in the same container. Fields: lower, upper.
void write_bound(std::ostream& out, const DisturbanceBound& bound,
                 const Grid2D& grid, double p, double z);

struct BoundFile {
  DisturbanceBound bound;
  double p;
  double z;
};
BoundFile read_bound(std::istream& in);

/// x1,x2 segment endpoints of the alpha-contour, one segment per line pair
/// as `segment,x1,x2`.
void write_contour_csv(std::ostream& out, const ValueGrid& v, double alpha = 0.0);

}  // namespace safelearn
