#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

namespace safelearn {

class Grid2D;

/// Vertical-flight state: altitude x1 (m) and vertical velocity x2 (m/s).
struct State {
  double x1 = 0.0;
  double x2 = 0.0;

  bool finite() const;
};

/// Time derivative of a State.
struct StateRate {
  double dx1 = 0.0;
  double dx2 = 0.0;
};

/// Thrown when a trajectory integration produces a non-finite state.
class NumericalBlowup : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Control-affine vertical flight model
///   x1' = x2
///   x2' = k_T u + g + k_0 + d
/// with u in [u_min, u_max] and d entering additively on the acceleration.
class AffineVerticalModel {
 public:
  static constexpr double kGravity = -9.8;

  AffineVerticalModel() : AffineVerticalModel(20.0, 0.0) {}
  AffineVerticalModel(double k_thrust, double k_offset, double u_min = 0.0,
                      double u_max = 1.0);

  double k_thrust() const { return k_thrust_; }
  double k_offset() const { return k_offset_; }
  double gravity() const { return kGravity; }
  double u_min() const { return u_min_; }
  double u_max() const { return u_max_; }

  /// Command that cancels gravity and offset when d = 0.
  double hover_command() const { return (-kGravity - k_offset_) / k_thrust_; }

  /// Known part of the acceleration, k_T u + g + k_0.
  double nominal_acceleration(double u) const {
    return k_thrust_ * u + kGravity + k_offset_;
  }

  bool control_admissible(double u) const;
  double clamp_control(double u) const;

 private:
  double k_thrust_;
  double k_offset_;
  double u_min_;
  double u_max_;
};

/// Throws std::invalid_argument if u lies outside the control interval.
StateRate eval_dynamics(const AffineVerticalModel& model, const State& x,
                        double u, double d);

/// Interval-valued disturbance bound, either constant or a gridded field of
/// [lower, upper] node values read by bilinear interpolation. Gridded fields
/// clamp queries to the grid extent.
class DisturbanceBound {
 public:
  struct Interval {
    double lower;
    double upper;
    double mid() const { return 0.5 * (lower + upper); }
    double width() const { return upper - lower; }
  };

  /// Constant bound [lower, upper] everywhere.
  static DisturbanceBound constant(double lower, double upper);
  /// Field sampled on `grid` nodes; vectors are row-major per Grid2D::index.
  static DisturbanceBound gridded(const Grid2D& grid, std::vector<double> lower,
                                  std::vector<double> upper);

  Interval at(const State& x) const;

  bool is_constant() const { return grid_ == nullptr; }
  const Grid2D* grid() const { return grid_.get(); }
  const std::vector<double>& lower_nodes() const { return lower_; }
  const std::vector<double>& upper_nodes() const { return upper_; }

  /// Largest |lower| or |upper| anywhere.
  double max_magnitude() const;

  /// Returns true if this bound is contained in `other` at every node of
  /// `grid` (up to `tol`).
  bool contained_in(const DisturbanceBound& other, const Grid2D& grid,
                    double tol = 0.0) const;

 private:
  DisturbanceBound() = default;

  std::shared_ptr<const Grid2D> grid_;
  std::vector<double> lower_;
  std::vector<double> upper_;
};

/// Nearest point of bound(x) to d_raw (the retraction onto the bound).
double project_disturbance(const DisturbanceBound& bound, const State& x,
                           double d_raw);

struct Trajectory {
  std::vector<double> times;
  std::vector<State> states;
  std::vector<double> controls;
  std::vector<double> disturbances;
};

using ControlPolicy = std::function<double(double t, const State& x)>;
using DisturbanceFn = std::function<double(double t, const State& x)>;

/// Fixed-step RK4 with control and disturbance held over each step. The
/// policy and disturbance are sampled at the start of each step. The last
/// step is shortened so the final time equals `horizon` exactly.
Trajectory integrate_trajectory(const AffineVerticalModel& model,
                                const State& x0, const ControlPolicy& policy,
                                const DisturbanceFn& disturbance, double dt,
                                double horizon);

/// Single RK4 step with u and d held constant.
State rk4_step(const AffineVerticalModel& model, const State& x, double u,
               double d, double dt);

struct ReliabilityConstants {
  double lipschitz_d = 1.0;
  double lipschitz_bound = 0.5;
  double dynamics_norm = 1.0;

  void validate() const;
};

/// Signed distance from d to the interval (negative inside).
double signed_distance(const DisturbanceBound::Interval& interval, double d);

/// Time over which a locally reliable model is guaranteed to remain reliable:
/// max(0, -s(d)) / ((L_d + L_Dhat) C_f).
double reliability_horizon(const ReliabilityConstants& consts,
                           const DisturbanceBound& bound, const State& x,
                           double d_meas);

/// Sup over grid nodes and input boxes of |f(x,u,d)| (Euclidean). Used as the
/// default C_f.
double dynamics_norm_bound(const AffineVerticalModel& model, const Grid2D& grid,
                           const DisturbanceBound& bound);

}  // namespace safelearn
