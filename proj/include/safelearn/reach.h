#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "safelearn/dynamics.h"
#include "safelearn/grid.h"

namespace safelearn {

/// Thrown for an out-of-extent query on a gridded field.
class OutOfGrid : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Thrown when the scheme parameters cannot give a stable time step.
class CflViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Altitude slab [floor, ceiling] that the vehicle must stay inside.
struct SlabConstraint {
  double floor = 0.0;
  double ceiling = 2.8;

  double midpoint() const { return 0.5 * (floor + ceiling); }
  bool contains(const State& x) const {
    return x.x1 >= floor && x.x1 <= ceiling;
  }
};

/// l(x) = min(x1 - floor, ceiling - x1) at each node.
std::vector<double> constraint_surface(const Grid2D& grid, double floor,
                                       double ceiling);

/// Optimal game inputs for a given costate at a state.
struct GameInputs {
  double u;
  double d;
};

/// max_u min_d p . f(x, u, d) in closed form.
double hamiltonian(const AffineVerticalModel& model, const State& x, double p1,
                   double p2, const DisturbanceBound& bound);
/// Maximizing control and minimizing disturbance for costate p2. At p2 == 0
/// returns (u_min, interval midpoint).
GameInputs hamiltonian_inputs(const AffineVerticalModel& model, const State& x,
                              double p2, const DisturbanceBound& bound);

enum class SpatialScheme { kWeno5, kUpwind1 };

struct SchemeParams {
  SpatialScheme spatial = SpatialScheme::kWeno5;
  /// Fraction of the stable step; must lie in (0, 0.5].
  double cfl = 0.5;
  /// Stop once max |dV/dtau| over the band drops below this (m per s).
  double tolerance = 1e-4;
  /// Pseudo-time cap (s).
  double horizon = 10.0;
  /// Convergence is measured on nodes with V >= -band; nodes deeper in the
  /// unsafe region keep decreasing when trajectories leave the grid.
  double convergence_band = 0.2;
  /// Called after every full time step with the current iterate.
  std::function<void(int step, double tau, std::span<const double> values)>
      observer;
};

const char* to_string(SpatialScheme s);
SpatialScheme spatial_scheme_from_string(const std::string& s);

struct ValueGrid {
  Grid2D grid;
  SlabConstraint constraint;
  std::vector<double> values;   // V
  std::vector<double> surface;  // l
  bool converged = false;
  double horizon_used = 0.0;
  int steps = 0;
  double final_rate = 0.0;  // max |dV/dtau| over the band at the last step

  double min_value() const;
  double max_value() const;
  /// Number of nodes with V >= 0 times the cell area.
  double safe_area() const;
};

struct SafePolicyTable {
  std::vector<double> u_star;
  std::vector<double> d_star;
  /// dV/dx2 at each node; its sign is the switching function of the policy.
  std::vector<double> switching;
  double u_min = 0.0;
  double u_max = 1.0;
  /// Zero-gradient ties steer to rest at this altitude along the
  /// minimum-time switching curve for braking acceleration `tie_accel`.
  double tie_split = 1.4;
  double tie_accel = 9.8;
  /// Ties beyond this speed brake, keeping the state on the grid.
  double tie_speed = 1e300;
  /// |dV/dx2| at or below this counts as a tie. Flat regions carry scheme
  /// noise of up to a few 1e-6.
  static constexpr double kTieTolerance = 1e-4;
  double tie_break(const State& x) const {
    if (x.x2 >= tie_speed) return u_min;
    if (x.x2 <= -tie_speed) return u_max;
    const double s = (tie_split - x.x1) - x.x2 * std::abs(x.x2) / (2.0 * tie_accel);
    return s > 0.0 ? u_max : u_min;
  }
};

struct ReachSolution {
  ValueGrid value;
  SafePolicyTable policy;
};

/// Infinite-horizon safety function of the minimum-payoff game on `grid`.
/// `bound` may be constant or gridded on the same grid.
ReachSolution solve_hji(const AffineVerticalModel& model, const Grid2D& grid,
                        const SlabConstraint& constraint,
                        const DisturbanceBound& bound,
                        const SchemeParams& params = {});

/// Bilinear interpolation of V. Throws OutOfGrid outside the extent.
double value_at(const ValueGrid& v, const State& x);

/// Interpolated dV/dx2 at x. Throws OutOfGrid.
double switching_at(const SafePolicyTable& policy, const ValueGrid& v,
                    const State& x);

/// Bang-bang safe control from the sign of the interpolated dV/dx2.
double safe_action(const SafePolicyTable& policy, const ValueGrid& v,
                   const State& x);

/// V(x) >= 0 (closed set).
bool safe_set_contains(const ValueGrid& v, const State& x);

/// Segments of the alpha-contour of the bilinear interpolant of V.
struct ContourSegment {
  State a;
  State b;
};
std::vector<ContourSegment> contour_segments(const ValueGrid& v, double alpha);

/// `count` points spaced uniformly in arc length over all contour pieces.
std::vector<State> level_set_points(const ValueGrid& v, double alpha,
                                    int count);

}  // namespace safelearn
