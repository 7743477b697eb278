#include "safelearn/dynamics.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "safelearn/grid.h"

namespace safelearn {

bool State::finite() const { return std::isfinite(x1) && std::isfinite(x2); }

AffineVerticalModel::AffineVerticalModel(double k_thrust, double k_offset,
                                         double u_min, double u_max)
    : k_thrust_(k_thrust), k_offset_(k_offset), u_min_(u_min), u_max_(u_max) {
  if (!(k_thrust > 0.0)) {
    throw std::invalid_argument("AffineVerticalModel: k_T must be positive");
  }
  if (!(u_min < u_max)) {
    throw std::invalid_argument("AffineVerticalModel: need u_min < u_max");
  }
  const double hover = hover_command();
  if (hover < u_min || hover > u_max) {
    throw std::invalid_argument(
        "AffineVerticalModel: hover command outside the control interval");
  }
}

bool AffineVerticalModel::control_admissible(double u) const {
  return u >= u_min_ && u <= u_max_;
}

double AffineVerticalModel::clamp_control(double u) const {
  return std::clamp(u, u_min_, u_max_);
}

StateRate eval_dynamics(const AffineVerticalModel& model, const State& x,
                        double u, double d) {
  if (!model.control_admissible(u)) {
    throw std::invalid_argument("eval_dynamics: control " + std::to_string(u) +
                                " outside the control interval");
  }
  return {x.x2, model.nominal_acceleration(u) + d};
}

DisturbanceBound DisturbanceBound::constant(double lower, double upper) {
  if (!(lower <= upper)) {
    throw std::invalid_argument("DisturbanceBound: lower > upper");
  }
  DisturbanceBound b;
  b.lower_ = {lower};
  b.upper_ = {upper};
  return b;
}

DisturbanceBound DisturbanceBound::gridded(const Grid2D& grid,
                                           std::vector<double> lower,
                                           std::vector<double> upper) {
  if (lower.size() != grid.size() || upper.size() != grid.size()) {
    throw std::invalid_argument("DisturbanceBound: field size mismatch");
  }
  for (std::size_t k = 0; k < lower.size(); ++k) {
    if (!(lower[k] <= upper[k])) {
      throw std::invalid_argument("DisturbanceBound: lower > upper at a node");
    }
  }
  DisturbanceBound b;
  b.grid_ = std::make_shared<const Grid2D>(grid);
  b.lower_ = std::move(lower);
  b.upper_ = std::move(upper);
  return b;
}

DisturbanceBound::Interval DisturbanceBound::at(const State& x) const {
  if (is_constant()) return {lower_[0], upper_[0]};
  // Interpolation of ordered node pairs keeps lower <= upper.
  return {grid_->interpolate(lower_, x), grid_->interpolate(upper_, x)};
}

double DisturbanceBound::max_magnitude() const {
  double m = 0.0;
  for (double v : lower_) m = std::max(m, std::abs(v));
  for (double v : upper_) m = std::max(m, std::abs(v));
  return m;
}

bool DisturbanceBound::contained_in(const DisturbanceBound& other,
                                    const Grid2D& grid, double tol) const {
  for (int i = 0; i < grid.n1(); ++i) {
    for (int j = 0; j < grid.n2(); ++j) {
      const State x = grid.node(i, j);
      const Interval a = at(x);
      const Interval b = other.at(x);
      if (a.lower < b.lower - tol || a.upper > b.upper + tol) return false;
    }
  }
  return true;
}

double project_disturbance(const DisturbanceBound& bound, const State& x,
                           double d_raw) {
  const auto iv = bound.at(x);
  return std::clamp(d_raw, iv.lower, iv.upper);
}

State rk4_step(const AffineVerticalModel& model, const State& x, double u,
               double d, double dt) {
  const double a = model.nominal_acceleration(u) + d;
  auto f = [a](const State& s) { return StateRate{s.x2, a}; };
  const StateRate k1 = f(x);
  const StateRate k2 = f({x.x1 + 0.5 * dt * k1.dx1, x.x2 + 0.5 * dt * k1.dx2});
  const StateRate k3 = f({x.x1 + 0.5 * dt * k2.dx1, x.x2 + 0.5 * dt * k2.dx2});
  const StateRate k4 = f({x.x1 + dt * k3.dx1, x.x2 + dt * k3.dx2});
  return {x.x1 + dt / 6.0 * (k1.dx1 + 2 * k2.dx1 + 2 * k3.dx1 + k4.dx1),
          x.x2 + dt / 6.0 * (k1.dx2 + 2 * k2.dx2 + 2 * k3.dx2 + k4.dx2)};
}

Trajectory integrate_trajectory(const AffineVerticalModel& model,
                                const State& x0, const ControlPolicy& policy,
                                const DisturbanceFn& disturbance, double dt,
                                double horizon) {
  if (!(dt > 0.0) || !(horizon >= dt)) {
    throw std::invalid_argument("integrate_trajectory: need dt > 0, horizon >= dt");
  }
  if (!x0.finite()) throw NumericalBlowup("integrate_trajectory: x0 not finite");

  const auto steps = static_cast<long>(std::ceil(horizon / dt - 1e-9));
  Trajectory traj;
  traj.times.reserve(steps + 1);
  traj.states.reserve(steps + 1);
  traj.controls.reserve(steps);
  traj.disturbances.reserve(steps);
  traj.times.push_back(0.0);
  traj.states.push_back(x0);

  State x = x0;
  for (long k = 0; k < steps; ++k) {
    const double t = k * dt;
    const double h = std::min(dt, horizon - t);
    const double u = policy(t, x);
    const double d = disturbance(t, x);
    if (!model.control_admissible(u)) {
      throw std::invalid_argument("integrate_trajectory: policy returned " +
                                  std::to_string(u) +
                                  " outside the control interval");
    }
    x = rk4_step(model, x, u, d, h);
    if (!x.finite()) {
      throw NumericalBlowup("integrate_trajectory: non-finite state at t=" +
                            std::to_string(t + h));
    }
    traj.controls.push_back(u);
    traj.disturbances.push_back(d);
    traj.times.push_back(k + 1 == steps ? horizon : (k + 1) * dt);
    traj.states.push_back(x);
  }
  return traj;
}

void ReliabilityConstants::validate() const {
  if (!(lipschitz_d > 0.0) || !(lipschitz_bound > 0.0) ||
      !(dynamics_norm > 0.0)) {
    throw std::invalid_argument("ReliabilityConstants: all must be positive");
  }
}

double signed_distance(const DisturbanceBound::Interval& interval, double d) {
  if (d < interval.lower) return interval.lower - d;
  if (d > interval.upper) return d - interval.upper;
  return -std::min(d - interval.lower, interval.upper - d);
}

double reliability_horizon(const ReliabilityConstants& consts,
                           const DisturbanceBound& bound, const State& x,
                           double d_meas) {
  consts.validate();
  const double s = signed_distance(bound.at(x), d_meas);
  return std::max(0.0, -s) /
         ((consts.lipschitz_d + consts.lipschitz_bound) * consts.dynamics_norm);
}

double dynamics_norm_bound(const AffineVerticalModel& model, const Grid2D& grid,
                           const DisturbanceBound& bound) {
  double best = 0.0;
  for (int i = 0; i < grid.n1(); ++i) {
    for (int j = 0; j < grid.n2(); ++j) {
      const State x = grid.node(i, j);
      const auto iv = bound.at(x);
      for (double u : {model.u_min(), model.u_max()}) {
        for (double d : {iv.lower, iv.upper}) {
          const double a = model.nominal_acceleration(u) + d;
          best = std::max(best, std::hypot(x.x2, a));
        }
      }
    }
  }
  return best;
}

}  // namespace safelearn
