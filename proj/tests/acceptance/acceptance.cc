// Acceptance suite: one PASS/FAIL line per criterion.
// Usage: acceptance [criterion ...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "safelearn/confidence.h"
#include "safelearn/gp.h"
#include "safelearn/reach.h"
#include "safelearn/sim.h"
#include "safelearn/special_functions.h"
#include "safelearn/supervisor.h"

using namespace safelearn;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

template <class... A>
std::string fmt(const char* f, A... a) {
  char buf[1024];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const AffineVerticalModel kModel;
const std::string kScenarios = SAFELEARN_SCENARIO_DIR;

// Horizontal distance from x to the nearest piece of the analytic boundary
// of the zero-disturbance safe set, in x1 cells.
double analytic_offset(const State& x, double dx1) {
  const double lower = x.x2 < 0.0 ? x.x2 * x.x2 / 20.4 : 0.0;
  const double upper = x.x2 > 0.0 ? 2.8 - x.x2 * x.x2 / 19.6 : 2.8;
  return std::min(std::abs(x.x1 - lower), std::abs(x.x1 - upper)) / dx1;
}

Outcome analytic_safe_set() {
  const Grid2D grid = Grid2D::standard();
  const auto t0 = std::chrono::steady_clock::now();
  const ReachSolution sol =
      solve_hji(kModel, grid, SlabConstraint{}, DisturbanceBound::constant(0.0, 0.0));
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  std::size_t points = 0;
  for (const auto& seg : contour_segments(sol.value, 0.0))
    for (const State& p : {seg.a, seg.b}) {
      worst = std::max(worst, analytic_offset(p, grid.dx1()));
      ++points;
    }
  const bool pass = sol.value.converged && points > 100 && worst <= 2.0 && elapsed < 60.0;
  return {pass, fmt("%dx%d grid, %zu contour points, worst offset %.2f cells (limit 2), "
                    "solve %.1f s (limit 60), converged %d",
                    grid.n1(), grid.n2(), points, worst, elapsed, sol.value.converged)};
}

Outcome monotonicity() {
  const Grid2D grid(-0.5, 3.3, 101, -3.0, 3.0, 101);
  const std::vector<double> l = constraint_surface(grid, 0.0, 2.8);
  const std::vector<double> scales{0.3, 0.6, 0.9, 1.2, 1.5};
  std::vector<ValueGrid> values;
  long above_l = 0, increases = 0;
  for (double c : scales) {
    std::vector<double> lo(grid.size()), hi(grid.size());
    for (int i = 0; i < grid.n1(); ++i)
      for (int j = 0; j < grid.n2(); ++j) {
        const State x = grid.node(i, j);
        const double centre = 0.2 * std::sin(2.0 * x.x1);
        const double half = c * (0.8 + 0.4 * std::abs(std::sin(x.x1 + x.x2)));
        lo[grid.index(i, j)] = centre - half;
        hi[grid.index(i, j)] = centre + half;
      }
    std::vector<double> prev = l;
    SchemeParams params;
    params.observer = [&](int, double, std::span<const double> v) {
      for (std::size_t k = 0; k < v.size(); ++k) {
        if (v[k] > prev[k]) ++increases;
        if (v[k] > l[k]) ++above_l;
        prev[k] = v[k];
      }
    };
    values.push_back(solve_hji(kModel, grid, SlabConstraint{},
                               DisturbanceBound::gridded(grid, lo, hi), params)
                         .value);
  }
  // A node that is safe under the wider bound but more than one cell outside
  // the safe set of the narrower one is a counterexample.
  long counter = 0;
  for (std::size_t b = 0; b + 1 < values.size(); ++b)
    for (std::size_t k = 0; k < grid.size(); ++k)
      if (values[b + 1].values[k] >= 0.0 && values[b].values[k] < -grid.dx1()) ++counter;
  std::string areas;
  for (const auto& v : values) areas += fmt("%.3f ", v.safe_area());
  const bool ordered = std::is_sorted(values.rbegin(), values.rend(),
                                      [](const ValueGrid& a, const ValueGrid& b) {
                                        return a.safe_area() < b.safe_area();
                                      });
  return {above_l == 0 && increases == 0 && counter == 0 && ordered,
          fmt("V > l at %ld node-steps, increases %ld, inclusion counterexamples %ld "
              "across 5 nested bounds, areas %s",
              above_l, increases, counter, areas.c_str())};
}

Outcome robust_invariance() {
  const ReachSolution sol = solve_hji(kModel, Grid2D::standard(), SlabConstraint{},
                                      DisturbanceBound::constant(-1.5, 1.5));
  const ValueGrid& v = sol.value;
  const auto bound = DisturbanceBound::constant(-1.5, 1.5);
  auto policy = [&](double, const State& x) { return safe_action(sol.policy, v, x); };
  auto adversary = [&](double, const State& x) {
    const auto iv = bound.at(x);
    const double s = switching_at(sol.policy, v, x);
    return s > 0 ? iv.lower : (s < 0 ? iv.upper : iv.mid());
  };
  int excursions = 0;
  double lowest = 1e9;
  for (int run = 0; run < 200; ++run) {
    std::mt19937_64 rng(1000 + run);
    std::uniform_real_distribution<double> u1(0.0, 2.8), u2(-3.0, 3.0);
    State x0{u1(rng), u2(rng)};
    while (value_at(v, x0) < 0.1) x0 = {u1(rng), u2(rng)};
    try {
      const Trajectory tr = integrate_trajectory(kModel, x0, policy, adversary, 0.01, 10.0);
      double run_low = 1e9;
      for (const State& s : tr.states) run_low = std::min(run_low, value_at(v, s));
      lowest = std::min(lowest, run_low);
      if (run_low < -v.grid.dx1()) ++excursions;
    } catch (const OutOfGrid&) {
      ++excursions;
    }
  }
  return {excursions == 0,
          fmt("200 runs of 10 s, %d excursions below -dx (%.4f), lowest V %.4f",
              excursions, -v.grid.dx1(), lowest)};
}

Dataset random_dataset(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u1(-0.5, 3.3), u2(-3.0, 3.0);
  std::normal_distribution<double> noise(0.0, 0.1);
  Dataset d;
  for (int k = 0; k < n; ++k) {
    const State x{u1(rng), u2(rng)};
    d.add(x, 0.5 * std::sin(2.0 * x.x1) + 0.2 * x.x2 + noise(rng));
  }
  return d;
}

Outcome gp_equivalence() {
  std::mt19937_64 rng(4);
  const Hyperparams th{0.7, 0.02, 0.3, 1.5};
  std::uniform_real_distribution<double> u1(-0.5, 3.3), u2(-3.0, 3.0);
  std::vector<State> queries;
  for (int k = 0; k < 40; ++k) queries.push_back({u1(rng), u2(rng)});

  double predict_err = 0.0;
  for (int n : {1, 2, 5, 10, 25, 50}) {
    const Dataset d = random_dataset(rng, n);
    Eigen::MatrixXd K(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) K(i, j) = kernel_eval(th, d.inputs[i], d.inputs[j]);
    K.diagonal().array() += th.sigma_n2 + Posterior::kJitter * th.sigma_f2;
    const Eigen::MatrixXd Kinv = K.inverse();
    const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(d.targets.data(), n);
    const Prediction p = posterior_predict(Posterior(th, d), queries);
    for (std::size_t q = 0; q < queries.size(); ++q) {
      Eigen::VectorXd k(n);
      for (int i = 0; i < n; ++i) k[i] = kernel_eval(th, d.inputs[i], queries[q]);
      const double mean = k.dot(Kinv * y);
      const double var = th.sigma_f2 - k.dot(Kinv * k);
      predict_err = std::max({predict_err, std::abs(p.mean[q] - mean),
                              std::abs(p.variance[q] - var)});
    }
  }

  double incr_err = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const Dataset all = random_dataset(rng, 50);
    Dataset head, tail;
    const int split = 10 + 8 * trial;
    for (int k = 0; k < 50; ++k) (k < split ? head : tail).add(all.inputs[k], all.targets[k]);
    Posterior incr(th, head);
    // Mix a block update with single-point updates.
    Dataset block, rest;
    for (std::size_t k = 0; k < tail.size(); ++k)
      (k < tail.size() / 2 ? block : rest).add(tail.inputs[k], tail.targets[k]);
    incr = incremental_update(std::move(incr), block);
    for (std::size_t k = 0; k < rest.size(); ++k) {
      Dataset one;
      one.add(rest.inputs[k], rest.targets[k]);
      incr = incremental_update(std::move(incr), one);
    }
    const Posterior full(th, all);
    const Prediction a = posterior_predict(incr, queries);
    const Prediction b = posterior_predict(full, queries);
    incr_err = std::max({incr_err, (a.mean - b.mean).cwiseAbs().maxCoeff(),
                         (a.variance - b.variance).cwiseAbs().maxCoeff(),
                         (incr.cholesky_factor() - full.cholesky_factor()).cwiseAbs().maxCoeff()});
  }

  double grad_err = 0.0;
  const Dataset d = random_dataset(rng, 40);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::Vector4d lp = th.to_log();
    for (int k = 0; k < 4; ++k) lp[k] += jitter(rng);
    Eigen::Vector4d g;
    log_marginal_likelihood(d, Hyperparams::from_log(lp), &g);
    for (int k = 0; k < 4; ++k) {
      const double h = 1e-5;
      Eigen::Vector4d a = lp, b = lp;
      a[k] += h;
      b[k] -= h;
      const double fd = (log_marginal_likelihood(d, Hyperparams::from_log(a)) -
                         log_marginal_likelihood(d, Hyperparams::from_log(b))) /
                        (2 * h);
      grad_err = std::max(grad_err, std::abs(g[k] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return {predict_err <= 1e-8 && incr_err <= 1e-8 && grad_err <= 1e-5,
          fmt("predict vs dense %.2e, incremental vs scratch %.2e (limit 1e-8), "
              "gradient vs finite differences %.2e relative (limit 1e-5)",
              predict_err, incr_err, grad_err)};
}

// z with erf(z / sqrt 2) = p by bisection on the standard library erf.
double bisect_z(double p) {
  double lo = 0.0, hi = 10.0;
  for (int k = 0; k < 200; ++k) {
    const double mid = 0.5 * (lo + hi);
    (std::erf(mid / std::sqrt(2.0)) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

Outcome bound_calibration() {
  const double z = interval_z(0.95, 1);
  const double oracle = bisect_z(0.95);
  const double z_err = std::max(std::abs(z - oracle), std::abs(z - 1.959964));

  std::mt19937_64 rng(23);
  const Hyperparams th{1.0, 0.04, 0.25, 1.0};
  const Grid2D g(0.0, 2.8, 9, -2.0, 2.0, 9);
  std::uniform_real_distribution<double> u1(0.0, 2.8), u2(-2.0, 2.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, 8);
  int inside = 0;
  const int draws = 10000;
  for (int t = 0; t < draws; ++t) {
    // Fresh inputs, a fresh function draw at inputs and node, noisy targets.
    std::vector<State> pts;
    for (int k = 0; k < 12; ++k) pts.push_back({u1(rng), u2(rng)});
    const State node = g.node(pick(rng), pick(rng));
    pts.push_back(node);
    const int n = static_cast<int>(pts.size());
    Eigen::MatrixXd K(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) K(i, j) = kernel_eval(th, pts[i], pts[j]);
    K.diagonal().array() += 1e-10;
    const Eigen::MatrixXd L = K.llt().matrixL();
    Eigen::VectorXd w(n);
    for (int i = 0; i < n; ++i) w[i] = nd(rng);
    const Eigen::VectorXd f = L * w;
    Dataset d;
    for (int i = 0; i + 1 < n; ++i) d.add(pts[i], f[i] + std::sqrt(th.sigma_n2) * nd(rng));
    const auto iv = build_bound(Posterior(th, d), g, 0.95).at(node);
    if (f[n - 1] >= iv.lower && f[n - 1] <= iv.upper) ++inside;
  }
  const double freq = static_cast<double>(inside) / draws;
  return {z_err <= 1e-6 && std::abs(freq - 0.95) <= 0.02,
          fmt("z = %.9f, bisection oracle %.9f, error %.1e (limit 1e-6); "
              "coverage %.4f over %d draws (0.95 +- 0.02)",
              z, oracle, z_err, freq, draws)};
}

Outcome lambda_construction() {
  const Grid2D grid(-0.5, 3.3, 81, -3.0, 3.0, 81);
  const SlabConstraint slab{0.0, 2.8};
  Dataset data;
  std::mt19937_64 rng(6);
  std::normal_distribution<double> noise(0.0, 0.05);
  for (double a = -0.4; a <= 3.2; a += 0.2)
    for (double v = -3.0; v <= 3.0; v += 0.4)
      data.add({a, v}, 0.3 * std::sin(a + 0.5 * v) + noise(rng));
  SupervisorConfig cfg;
  cfg.mode = SupervisorMode::kLocal;
  const Hyperparams shape{1.0, 0.01, 0.25, 1.0};
  const GuaranteesPtr g0 = prior_guarantees(kModel, grid, slab, 1.5, shape, cfg.p);
  const GuaranteesPtr g1 = recompute_guarantees(1, data, 10.0, shape, kModel, grid, slab, cfg);

  Supervisor sup(cfg, kModel, g0);
  sup.install(g1);
  std::uniform_real_distribution<double> x1(0.2, 2.6), x2(-1.5, 1.5);
  std::vector<State> probes;
  double worst = 0.0;
  while (probes.size() < 100) {
    const State x{x1(rng), x2(rng)};
    if (!(value_at(g1->value, x) > 0.0)) continue;
    probes.push_back(x);
    const Decision d = sup.select_action(x, 0.5);
    worst = std::max(worst, std::isfinite(d.lambda) ? std::abs(d.lambda - cfg.p) : 1.0);
  }

  // Move the live mean at each probe by 3 z sigma with one observation there.
  const Posterior& frozen = g1->frozen;
  const Hyperparams& th = frozen.hyperparams();
  const double noise2 = th.sigma_n2 + Posterior::kJitter * th.sigma_f2;
  double highest = 0.0, shift_err = 0.0;
  for (const State& x : probes) {
    const auto [m, s] = frozen.predict_point(x);
    const double want = m + 3.0 * g1->z * s;
    Dataset one;
    one.add(x, m + 3.0 * g1->z * s * (s * s + noise2) / (s * s));
    const Posterior live = incremental_update(frozen, one);
    shift_err = std::max(shift_err, std::abs(live.predict_mean(x) - want) / (g1->z * s));
    const ConfidenceQuery q{x, &frozen, &live, g1->p, g1->z, cfg.conservative};
    highest = std::max(highest, local_confidence(q));
  }
  return {worst <= 1e-6 && highest < 0.03 && shift_err < 1e-6,
          fmt("max |lambda - p| after recompute %.2e over 100 states (limit 1e-6); "
              "max lambda after a 3 z sigma shift %.2e (limit 0.03)",
              worst, highest)};
}

// Plain Monte Carlo with coordinates generated in Cholesky order so that a
// sample is dropped at its first coordinate outside the box.
double mc_box(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
              const Eigen::VectorXd& lo, const Eigen::VectorXd& hi, long n,
              std::uint64_t seed, double* se) {
  const Eigen::MatrixXd l = cov.llt().matrixL();
  const Eigen::Index d = mean.size();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::VectorXd w(d);
  long hits = 0;
  for (long k = 0; k < n; ++k) {
    bool in = true;
    for (Eigen::Index i = 0; i < d && in; ++i) {
      w[i] = g(rng);
      const double x = mean[i] + l.row(i).head(i + 1).dot(w.head(i + 1));
      in = x >= lo[i] && x <= hi[i];
    }
    if (in) ++hits;
  }
  const double p = static_cast<double>(hits) / n;
  *se = std::sqrt(p * (1.0 - p) / n);
  return p;
}

Outcome mvn_oracle() {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> width(0.3, 2.5);
  std::uniform_int_distribution<int> dim(1, 10);
  MvnOptions opt;
  opt.accuracy = 1e-4;
  double worst_ratio = 0.0;
  int failures = 0, tens = 0;
  for (int box = 0; box < 20; ++box) {
    const int d = box < 3 ? 10 : dim(rng);
    if (d == 10) ++tens;
    Eigen::MatrixXd a(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) a(i, j) = nd(rng);
    const Eigen::MatrixXd cov = a * a.transpose() / d + 0.1 * Eigen::MatrixXd::Identity(d, d);
    Eigen::VectorXd mean(d), lo(d), hi(d);
    for (int i = 0; i < d; ++i) {
      mean[i] = 0.5 * nd(rng);
      const double sd = std::sqrt(cov(i, i));
      lo[i] = mean[i] - width(rng) * sd;
      hi[i] = mean[i] + width(rng) * sd;
    }
    opt.seed = 100 + box;
    const MvnResult r = mvn_rectangle_prob(mean, cov, lo, hi, opt);
    double se = 0.0;
    const double mc = mc_box(mean, cov, lo, hi, 10'000'000, 500 + box, &se);
    const double combined = std::sqrt(se * se + r.std_error * r.std_error);
    const double ratio = std::abs(r.probability - mc) / combined;
    worst_ratio = std::max(worst_ratio, ratio);
    if (ratio > 3.0) ++failures;
  }

  Eigen::VectorXd m(1), lo(1), hi(1);
  Eigen::MatrixXd c(1, 1);
  m << 0.3;
  c << 2.0;
  lo << -1.0;
  hi << 1.7;
  const double s = std::sqrt(2.0);
  const double want = 0.5 * (std::erf((1.7 - 0.3) / (s * std::sqrt(2.0))) -
                             std::erf((-1.0 - 0.3) / (s * std::sqrt(2.0))));
  const double one_d = std::abs(mvn_rectangle_prob(m, c, lo, hi).probability - want);
  return {failures == 0 && one_d <= 1e-6,
          fmt("20 boxes (%d of dimension 10) vs 1e7-sample Monte Carlo: %d beyond 3 "
              "combined standard errors, worst %.2f; 1-D vs erf %.1e (limit 1e-6)",
              tens, failures, worst_ratio, one_d)};
}

Outcome experiment_fall_to_flight() {
  const Scenario s = load_scenario(kScenarios + "/fall_to_flight.cfg");
  const auto t0 = std::chrono::steady_clock::now();
  const GuaranteesPtr prior = scenario_prior(s);
  const ExperimentLog log = run_scenario(s, {prior, {}});
  const double elapsed = seconds_since(t0);
  Scenario none = s;
  none.supervisor.mode = SupervisorMode::kNone;
  const ExperimentLog baseline = run_scenario(none, {prior, {}});

  const int early = log.overrides(0.0, 5.0);
  const double before = log.mean_tracking_error(10.0, 30.0);
  const double after = log.mean_tracking_error(60.0, 80.0);
  const bool pass = log.violations.empty() && early >= 1 && after < 0.5 * before &&
                    !baseline.violations.empty() && elapsed < 300.0;
  return {pass, fmt("violations %zu; overrides in first 5 s %d; tracking error 60-80 s "
                    "%.3f vs 10-30 s %.3f, ratio %.2f (limit 0.5); unsupervised "
                    "violations %zu; runtime %.1f s",
                    log.violations.size(), early, after, before, after / before,
                    baseline.violations.size(), elapsed)};
}

Outcome experiment_iterative_refinement() {
  const Scenario s = load_scenario(kScenarios + "/iterative_refinement.cfg");
  const ExperimentLog log = run_scenario(s);
  if (log.versions.size() != 3)
    return {false, fmt("expected 3 guarantee versions, got %zu", log.versions.size())};
  const double c1 = log.versions[1].guarantees->data_until;
  const double c2 = log.versions[2].guarantees->data_until;
  const double a1 = log.versions[0].guarantees->value.safe_area();
  const double a2 = log.versions[1].guarantees->value.safe_area();
  const double a3 = log.versions[2].guarantees->value.safe_area();
  const int lambda = log.overrides(c1, c2, OverrideReason::kLambda);
  const bool pass = std::abs(c1 - 10.0) < 1e-9 && std::abs(c2 - 20.0) < 1e-9 &&
                    lambda >= 1 && log.violations.empty() && a2 > a3 && a3 > a1;
  return {pass, fmt("recomputes at %.1f s and %.1f s; lambda overrides between them %d; "
                    "violations %zu; safe-set areas %.3f -> %.3f -> %.3f",
                    c1, c2, lambda, log.violations.size(), a1, a2, a3)};
}

Outcome experiment_fan() {
  Scenario s = load_scenario(kScenarios + "/fan.cfg");
  const GuaranteesPtr prior = scenario_prior(s);
  bool pass = true;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    s.seed = seed;
    s.learner.seed = seed;
    s.supervisor.mode = SupervisorMode::kLocal;
    const ExperimentLog local = run_scenario(s, {prior, {}});
    double lowest = 1e9;
    for (const auto& r : local.rows)
      if (r.t >= s.disturbance.fan.t_on) lowest = std::min(lowest, r.x.x1);
    s.supervisor.mode = SupervisorMode::kNone;
    const ExperimentLog none = run_scenario(s, {prior, {}});
    pass = pass && local.violations.empty() && lowest > 0.4 && !none.violations.empty();
    detail += fmt("%sseed %d: local %zu violations, min altitude %.3f; none %zu violations",
                  seed > 1 ? "; " : "", static_cast<int>(seed), local.violations.size(),
                  lowest, none.violations.size());
  }
  return {pass, detail};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "analytic safe set", analytic_safe_set},
      {2, "monotonicity", monotonicity},
      {3, "robust invariance", robust_invariance},
      {4, "GP equivalence", gp_equivalence},
      {5, "bound calibration", bound_calibration},
      {6, "lambda construction", lambda_construction},
      {7, "MVN oracle", mvn_oracle},
      {8, "fall to flight", experiment_fall_to_flight},
      {9, "iterative refinement", experiment_iterative_refinement},
      {10, "fan disturbance", experiment_fan},
  };
  std::vector<int> wanted;
  for (int k = 1; k < argc; ++k) wanted.push_back(std::atoi(argv[k]));
  int failed = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.id) == wanted.end())
      continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s %d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
