#include "safelearn/reach.h"

#include <algorithm>
#include <cmath>
#include <limits>

namespace safelearn {

namespace {

constexpr int kGhost = 3;

// One-sided WENO5 derivative from five consecutive first differences ordered
// from the far upwind side towards the node.
inline double weno5(double v1, double v2, double v3, double v4, double v5) {
  const double p1 = v1 / 3.0 - 7.0 * v2 / 6.0 + 11.0 * v3 / 6.0;
  const double p2 = -v2 / 6.0 + 5.0 * v3 / 6.0 + v4 / 3.0;
  const double p3 = v3 / 3.0 + 5.0 * v4 / 6.0 - v5 / 6.0;

  const double a = v1 - 2 * v2 + v3, b = v1 - 4 * v2 + 3 * v3;
  const double c = v2 - 2 * v3 + v4, e = v2 - v4;
  const double f = v3 - 2 * v4 + v5, g = 3 * v3 - 4 * v4 + v5;
  const double s1 = 13.0 / 12.0 * a * a + 0.25 * b * b;
  const double s2 = 13.0 / 12.0 * c * c + 0.25 * e * e;
  const double s3 = 13.0 / 12.0 * f * f + 0.25 * g * g;

  const double vmax = std::max({v1 * v1, v2 * v2, v3 * v3, v4 * v4, v5 * v5});
  const double eps = 1e-6 * vmax + 1e-99;
  const double a1 = 0.1 / ((s1 + eps) * (s1 + eps));
  const double a2 = 0.6 / ((s2 + eps) * (s2 + eps));
  const double a3 = 0.3 / ((s3 + eps) * (s3 + eps));
  return (a1 * p1 + a2 * p2 + a3 * p3) / (a1 + a2 + a3);
}

// Left and right derivatives along one line of n values with stride.
// `pad` and `diff` are scratch buffers of size n + 6 and n + 5.
void line_derivatives(const double* values, std::size_t stride, int n,
                      double dx, SpatialScheme scheme, std::vector<double>& pad,
                      std::vector<double>& diff, double* left, double* right,
                      std::size_t out_stride) {
  for (int i = 0; i < n; ++i) pad[i + kGhost] = values[i * stride];
  // Linear extrapolation into the ghost cells.
  const double lo_slope = pad[kGhost + 1] - pad[kGhost];
  const double hi_slope = pad[kGhost + n - 1] - pad[kGhost + n - 2];
  for (int k = 1; k <= kGhost; ++k) {
    pad[kGhost - k] = pad[kGhost] - k * lo_slope;
    pad[kGhost + n - 1 + k] = pad[kGhost + n - 1] + k * hi_slope;
  }
  const double inv = 1.0 / dx;
  for (int m = 0; m < n + 5; ++m) diff[m] = (pad[m + 1] - pad[m]) * inv;

  if (scheme == SpatialScheme::kUpwind1) {
    for (int i = 0; i < n; ++i) {
      const int m = i + kGhost;
      left[i * out_stride] = diff[m - 1];
      right[i * out_stride] = diff[m];
    }
    return;
  }
  for (int i = 0; i < n; ++i) {
    const int m = i + kGhost;
    left[i * out_stride] =
        weno5(diff[m - 3], diff[m - 2], diff[m - 1], diff[m], diff[m + 1]);
    right[i * out_stride] =
        weno5(diff[m + 2], diff[m + 1], diff[m], diff[m - 1], diff[m - 2]);
  }
}

struct Gradients {
  std::vector<double> p1_left, p1_right, p2_left, p2_right;
};

class GradientEngine {
 public:
  GradientEngine(const Grid2D& grid, SpatialScheme scheme)
      : grid_(grid), scheme_(scheme) {
    const int n = std::max(grid.n1(), grid.n2());
    pad_.resize(n + 2 * kGhost);
    diff_.resize(n + 2 * kGhost - 1);
    g_.p1_left.resize(grid.size());
    g_.p1_right.resize(grid.size());
    g_.p2_left.resize(grid.size());
    g_.p2_right.resize(grid.size());
  }

  const Gradients& compute(const std::vector<double>& v) {
    const int n1 = grid_.n1(), n2 = grid_.n2();
    // Along x1: fixed j, stride n2.
    for (int j = 0; j < n2; ++j) {
      line_derivatives(v.data() + j, n2, n1, grid_.dx1(), scheme_, pad_, diff_,
                       g_.p1_left.data() + j, g_.p1_right.data() + j, n2);
    }
    // Along x2: fixed i, contiguous.
    for (int i = 0; i < n1; ++i) {
      const std::size_t off = grid_.index(i, 0);
      line_derivatives(v.data() + off, 1, n2, grid_.dx2(), scheme_, pad_,
                       diff_, g_.p2_left.data() + off,
                       g_.p2_right.data() + off, 1);
    }
    return g_;
  }

 private:
  const Grid2D& grid_;
  SpatialScheme scheme_;
  std::vector<double> pad_, diff_;
  Gradients g_;
};

// Node-wise acceleration extremes used by the Hamiltonian: the controller
// maximizes and the disturbance minimizes p2 * accel.
struct NodeAccel {
  std::vector<double> up;    // k_T u_max + g + k_0 + lower
  std::vector<double> down;  // k_T u_min + g + k_0 + upper
  std::vector<double> lower, upper;
};

NodeAccel node_accelerations(const AffineVerticalModel& model,
                             const Grid2D& grid,
                             const DisturbanceBound& bound) {
  NodeAccel acc;
  acc.up.resize(grid.size());
  acc.down.resize(grid.size());
  acc.lower.resize(grid.size());
  acc.upper.resize(grid.size());
  const double a_max = model.nominal_acceleration(model.u_max());
  const double a_min = model.nominal_acceleration(model.u_min());
  for (int i = 0; i < grid.n1(); ++i) {
    for (int j = 0; j < grid.n2(); ++j) {
      const std::size_t k = grid.index(i, j);
      const auto iv = bound.at(grid.node(i, j));
      acc.lower[k] = iv.lower;
      acc.upper[k] = iv.upper;
      acc.up[k] = a_max + iv.lower;
      acc.down[k] = a_min + iv.upper;
    }
  }
  return acc;
}

void check_bound_grid(const Grid2D& grid, const DisturbanceBound& bound) {
  if (!bound.is_constant() && !(*bound.grid() == grid)) {
    throw std::invalid_argument(
        "solve_hji: gridded disturbance bound lives on a different grid");
  }
}

}  // namespace

std::vector<double> constraint_surface(const Grid2D& grid, double floor,
                                       double ceiling) {
  if (!(floor < ceiling)) {
    throw std::invalid_argument("constraint_surface: need floor < ceiling");
  }
  std::vector<double> l(grid.size());
  for (int i = 0; i < grid.n1(); ++i) {
    const double x1 = grid.x1(i);
    const double li = std::min(x1 - floor, ceiling - x1);
    for (int j = 0; j < grid.n2(); ++j) l[grid.index(i, j)] = li;
  }
  return l;
}

GameInputs hamiltonian_inputs(const AffineVerticalModel& model, const State& x,
                              double p2, const DisturbanceBound& bound) {
  const auto iv = bound.at(x);
  if (p2 > 0.0) return {model.u_max(), iv.lower};
  if (p2 < 0.0) return {model.u_min(), iv.upper};
  return {model.u_min(), iv.mid()};
}

double hamiltonian(const AffineVerticalModel& model, const State& x, double p1,
                   double p2, const DisturbanceBound& bound) {
  const GameInputs in = hamiltonian_inputs(model, x, p2, bound);
  if (p2 == 0.0) return p1 * x.x2;
  return p1 * x.x2 + p2 * (model.nominal_acceleration(in.u) + in.d);
}

const char* to_string(SpatialScheme s) {
  return s == SpatialScheme::kWeno5 ? "weno5" : "upwind1";
}

SpatialScheme spatial_scheme_from_string(const std::string& s) {
  if (s == "weno5") return SpatialScheme::kWeno5;
  if (s == "upwind1") return SpatialScheme::kUpwind1;
  throw std::invalid_argument("unknown spatial scheme '" + s + "'");
}

double ValueGrid::min_value() const {
  return *std::min_element(values.begin(), values.end());
}

double ValueGrid::max_value() const {
  return *std::max_element(values.begin(), values.end());
}

double ValueGrid::safe_area() const {
  const auto n = std::count_if(values.begin(), values.end(),
                               [](double v) { return v >= 0.0; });
  return static_cast<double>(n) * grid.dx1() * grid.dx2();
}

ReachSolution solve_hji(const AffineVerticalModel& model, const Grid2D& grid,
                        const SlabConstraint& constraint,
                        const DisturbanceBound& bound,
                        const SchemeParams& params) {
  if (!(params.cfl > 0.0) || params.cfl > 0.5) {
    throw CflViolation("solve_hji: CFL factor must lie in (0, 0.5], got " +
                       std::to_string(params.cfl));
  }
  if (!(params.tolerance > 0.0) || !(params.horizon > 0.0)) {
    throw std::invalid_argument("solve_hji: tolerance and horizon must be > 0");
  }
  check_bound_grid(grid, bound);

  const std::size_t n = grid.size();
  const std::vector<double> l =
      constraint_surface(grid, constraint.floor, constraint.ceiling);
  const NodeAccel acc = node_accelerations(model, grid, bound);

  double alpha1 = std::max(std::abs(grid.x2_min()), std::abs(grid.x2_max()));
  double alpha2 = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    alpha2 = std::max({alpha2, std::abs(acc.up[k]), std::abs(acc.down[k])});
  }
  const double rate = alpha1 / grid.dx1() + alpha2 / grid.dx2();
  if (!(rate > 0.0) || !std::isfinite(rate)) {
    throw CflViolation("solve_hji: degenerate dissipation coefficients");
  }
  const double dt = params.cfl / rate;

  std::vector<double> x2_nodes(n);
  for (int i = 0; i < grid.n1(); ++i) {
    for (int j = 0; j < grid.n2(); ++j) x2_nodes[grid.index(i, j)] = grid.x2(j);
  }

  GradientEngine engine(grid, params.spatial);

  // dV/dtau = min(0, H_LF), never positive so iterates are non-increasing.
  auto rhs = [&](const std::vector<double>& v, std::vector<double>& out) {
    const Gradients& g = engine.compute(v);
    for (std::size_t k = 0; k < n; ++k) {
      const double p1 = 0.5 * (g.p1_left[k] + g.p1_right[k]);
      const double p2 = 0.5 * (g.p2_left[k] + g.p2_right[k]);
      double h = p1 * x2_nodes[k];
      if (p2 > 0.0) {
        h += p2 * acc.up[k];
      } else if (p2 < 0.0) {
        h += p2 * acc.down[k];
      }
      h += 0.5 * alpha1 * (g.p1_right[k] - g.p1_left[k]) +
           0.5 * alpha2 * (g.p2_right[k] - g.p2_left[k]);
      out[k] = std::min(0.0, h);
    }
  };
  auto freeze = [&](std::vector<double>& v) {
    for (std::size_t k = 0; k < n; ++k) v[k] = std::min(v[k], l[k]);
  };

  std::vector<double> v = l, v1(n), v2(n), f(n), prev(n);
  double tau = 0.0;
  int step = 0;
  bool converged = false;
  double last_rate = std::numeric_limits<double>::infinity();

  while (tau < params.horizon - 1e-12) {
    const double h = std::min(dt, params.horizon - tau);
    prev = v;
    // TVD-RK3 (Shu-Osher) with the freeze after each stage. Stages are
    // written as non-positive increments of v so that rounding cannot push
    // an iterate above its predecessor.
    rhs(v, f);
    for (std::size_t k = 0; k < n; ++k) v1[k] = v[k] + h * f[k];
    freeze(v1);
    rhs(v1, f);
    for (std::size_t k = 0; k < n; ++k)
      v2[k] = v[k] + 0.25 * ((v1[k] - v[k]) + h * f[k]);
    freeze(v2);
    rhs(v2, f);
    for (std::size_t k = 0; k < n; ++k)
      v[k] = v[k] + 2.0 / 3.0 * ((v2[k] - v[k]) + h * f[k]);
    freeze(v);

    tau += h;
    ++step;
    for (std::size_t k = 0; k < n; ++k) {
      if (!std::isfinite(v[k])) {
        throw NumericalBlowup("solve_hji: non-finite value at step " +
                              std::to_string(step));
      }
    }
    if (params.observer) params.observer(step, tau, v);

    double max_change = 0.0;
    double max_value = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
      max_value = std::max(max_value, v[k]);
      if (v[k] >= -params.convergence_band) {
        max_change = std::max(max_change, prev[k] - v[k]);
      }
    }
    last_rate = max_change / h;
    // Iterates never increase, so an empty safe set stays empty.
    if (last_rate < params.tolerance || max_value < 0.0) {
      converged = true;
      break;
    }
  }

  ReachSolution sol{ValueGrid{grid, constraint, v, l, converged, tau, step,
                              last_rate},
                    SafePolicyTable{}};

  SafePolicyTable& pol = sol.policy;
  pol.u_min = model.u_min();
  pol.u_max = model.u_max();
  pol.tie_split = constraint.midpoint();
  pol.tie_accel = std::min(std::abs(model.nominal_acceleration(model.u_max())),
                           std::abs(model.nominal_acceleration(model.u_min())));
  if (!(pol.tie_accel > 0.0)) pol.tie_accel = 1.0;
  if (grid.x2_min() < 0.0 && grid.x2_max() > 0.0)
    pol.tie_speed = 0.8 * std::min(-grid.x2_min(), grid.x2_max());
  pol.u_star.resize(n);
  pol.d_star.resize(n);
  pol.switching.resize(n);
  const Gradients& g = engine.compute(v);
  for (int i = 0; i < grid.n1(); ++i) {
    for (int j = 0; j < grid.n2(); ++j) {
      const std::size_t k = grid.index(i, j);
      const double p2 = 0.5 * (g.p2_left[k] + g.p2_right[k]);
      pol.switching[k] = p2;
      if (p2 > SafePolicyTable::kTieTolerance) {
        pol.u_star[k] = model.u_max();
        pol.d_star[k] = acc.lower[k];
      } else if (p2 < -SafePolicyTable::kTieTolerance) {
        pol.u_star[k] = model.u_min();
        pol.d_star[k] = acc.upper[k];
      } else {
        pol.u_star[k] = pol.tie_break(grid.node(i, j));
        pol.d_star[k] = 0.5 * (acc.lower[k] + acc.upper[k]);
      }
    }
  }
  return sol;
}

namespace {

void require_inside(const Grid2D& grid, const State& x, const char* what) {
  if (!grid.contains(x)) {
    throw OutOfGrid(std::string(what) + ": state (" + std::to_string(x.x1) +
                    ", " + std::to_string(x.x2) + ") outside the grid");
  }
}

}  // namespace

double value_at(const ValueGrid& v, const State& x) {
  require_inside(v.grid, x, "value_at");
  return v.grid.interpolate(v.values, x);
}

double switching_at(const SafePolicyTable& policy, const ValueGrid& v,
                    const State& x) {
  require_inside(v.grid, x, "switching_at");
  return v.grid.interpolate(policy.switching, x);
}

double safe_action(const SafePolicyTable& policy, const ValueGrid& v,
                   const State& x) {
  const double s = switching_at(policy, v, x);
  if (s > SafePolicyTable::kTieTolerance) return policy.u_max;
  if (s < -SafePolicyTable::kTieTolerance) return policy.u_min;
  return policy.tie_break(x);
}

bool safe_set_contains(const ValueGrid& v, const State& x) {
  return value_at(v, x) >= 0.0;
}

std::vector<ContourSegment> contour_segments(const ValueGrid& v,
                                             double alpha) {
  const Grid2D& g = v.grid;
  std::vector<ContourSegment> segs;
  auto val = [&](int i, int j) { return v.values[g.index(i, j)] - alpha; };
  // Crossing point on the edge between two nodes with opposite signs.
  auto cross = [](const State& a, double fa, const State& b, double fb) {
    const double t = fa / (fa - fb);
    return State{a.x1 + t * (b.x1 - a.x1), a.x2 + t * (b.x2 - a.x2)};
  };

  for (int i = 0; i + 1 < g.n1(); ++i) {
    for (int j = 0; j + 1 < g.n2(); ++j) {
      // Corners counter-clockwise: (i,j) (i+1,j) (i+1,j+1) (i,j+1).
      const State c[4] = {g.node(i, j), g.node(i + 1, j), g.node(i + 1, j + 1),
                          g.node(i, j + 1)};
      const double f[4] = {val(i, j), val(i + 1, j), val(i + 1, j + 1),
                           val(i, j + 1)};
      int mask = 0;
      for (int k = 0; k < 4; ++k) mask |= (f[k] >= 0.0 ? 1 : 0) << k;
      if (mask == 0 || mask == 15) continue;

      // Edge e joins corner e and corner e+1.
      State pts[4];
      bool has[4] = {false, false, false, false};
      for (int e = 0; e < 4; ++e) {
        const int a = e, b = (e + 1) % 4;
        if ((f[a] >= 0.0) != (f[b] >= 0.0)) {
          pts[e] = cross(c[a], f[a], c[b], f[b]);
          has[e] = true;
        }
      }
      if (mask == 5 || mask == 10) {
        // Saddle: the bilinear center value picks the connection.
        const double center = 0.25 * (f[0] + f[1] + f[2] + f[3]);
        const bool center_in = center >= 0.0;
        const bool c0_in = f[0] >= 0.0;
        if (center_in == c0_in) {
          segs.push_back({pts[0], pts[1]});
          segs.push_back({pts[2], pts[3]});
        } else {
          segs.push_back({pts[3], pts[0]});
          segs.push_back({pts[1], pts[2]});
        }
        continue;
      }
      State ends[2];
      int found = 0;
      for (int e = 0; e < 4 && found < 2; ++e) {
        if (has[e]) ends[found++] = pts[e];
      }
      if (found == 2) segs.push_back({ends[0], ends[1]});
    }
  }
  return segs;
}

std::vector<State> level_set_points(const ValueGrid& v, double alpha,
                                    int count) {
  if (count < 1) throw std::invalid_argument("level_set_points: count < 1");
  const auto segs = contour_segments(v, alpha);
  std::vector<double> cumulative;
  cumulative.reserve(segs.size() + 1);
  cumulative.push_back(0.0);
  for (const auto& s : segs) {
    cumulative.push_back(cumulative.back() +
                         std::hypot(s.b.x1 - s.a.x1, s.b.x2 - s.a.x2));
  }
  const double total = cumulative.back();
  std::vector<State> out;
  if (segs.empty() || !(total > 0.0)) {
    // Degenerate contour through nodes only: report its vertices.
    for (std::size_t k = 0; k < segs.size() && out.size() < 1; ++k) {
      out.push_back(segs[k].a);
    }
    return out;
  }
  out.reserve(count);
  std::size_t seg = 0;
  for (int k = 0; k < count; ++k) {
    const double s = (k + 0.5) * total / count;
    while (seg + 1 < segs.size() && cumulative[seg + 1] < s) ++seg;
    const double len = cumulative[seg + 1] - cumulative[seg];
    const double t = len > 0.0 ? (s - cumulative[seg]) / len : 0.0;
    const auto& sg = segs[seg];
    out.push_back({sg.a.x1 + t * (sg.b.x1 - sg.a.x1),
                   sg.a.x2 + t * (sg.b.x2 - sg.a.x2)});
  }
  return out;
}

}  // namespace safelearn
