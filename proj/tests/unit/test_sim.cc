#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "safelearn/sim.h"

using namespace safelearn;

namespace {

std::vector<State> sample(double t0, double dt, int n, auto f1, auto f2) {
  std::vector<State> y;
  for (int j = 0; j < n; ++j) y.push_back({f1(t0 + j * dt), f2(t0 + j * dt)});
  return y;
}

// Cheap scenario for end-to-end checks.
Scenario small_scenario() {
  Scenario s;
  s.name = "small";
  s.duration = 6.0;
  s.grid_n1 = 41;
  s.grid_n2 = 41;
  s.initial = {1.0, 0.0};
  s.reference.kind = ReferenceKind::kConstant;
  s.reference.offset = 1.0;
  s.learner.learning = false;
  s.initial_weights = {-0.3, 0.3, -0.2, 0.2, 0.0, 0.0, 0.49, 0.49};
  return s;
}

}  // namespace

TEST_CASE("differentiate is exact on linear signals") {
  const double dt = 0.05;
  for (int n : {3, 5, 7, 9}) {
    const auto y = sample(0.3, dt, n, [](double t) { return 2.0 - 0.7 * t; },
                          [](double t) { return 0.4 + 3.0 * t; });
    const auto r = differentiate(y, dt);
    for (const auto& d : r) {
      CHECK(d.dx1 == doctest::Approx(-0.7).epsilon(1e-10));
      CHECK(d.dx2 == doctest::Approx(3.0).epsilon(1e-10));
    }
  }
}

TEST_CASE("differentiate reproduces quadratic derivatives") {
  const double dt = 0.05;
  const int n = 7;
  const auto y = sample(1.0, dt, n, [](double t) { return t * t; },
                        [](double t) { return -0.5 * t * t + t; });
  const auto r = differentiate(y, dt);
  for (int j = 0; j < n; ++j) {
    const double t = 1.0 + j * dt;
    CHECK(std::abs(r[j].dx1 - 2.0 * t) < 1e-3);
    CHECK(std::abs(r[j].dx2 - (1.0 - t)) < 1e-3);
  }
}

TEST_CASE("smoothing lowers the noise of the centre derivative") {
  // Oracle: the estimate is linear in the samples, so its noise variance is
  // sigma^2 times the squared norm of the impulse responses.
  const double dt = 0.05, sigma = 0.01;
  const int n = 7, c = 3;
  double gain2 = 0.0;
  for (int j = 0; j < n; ++j) {
    std::vector<State> e(n);
    e[j].x1 = 1.0;
    const double cj = differentiate(e, dt)[c].dx1;
    gain2 += cj * cj;
  }
  const double raw_var = 2.0 * sigma * sigma / (4.0 * dt * dt);
  CHECK(sigma * sigma * gain2 < 0.5 * raw_var);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, sigma);
  double s2 = 0.0;
  const int trials = 20000;
  for (int k = 0; k < trials; ++k) {
    std::vector<State> y(n);
    for (auto& v : y) v.x1 = g(rng);
    const double d = differentiate(y, dt)[c].dx1;
    s2 += d * d;
  }
  CHECK(s2 / trials == doctest::Approx(sigma * sigma * gain2).epsilon(0.05));
}

TEST_CASE("differentiate rejects short windows") {
  CHECK_THROWS_AS(differentiate(std::vector<State>(2), 0.05), std::invalid_argument);
  CHECK_THROWS_AS(differentiate(std::vector<State>(5), 0.0), std::invalid_argument);
}

TEST_CASE("effective input matches the acceleration the filter reads") {
  // Exact double-integrator samples under piecewise-constant thrust.
  const AffineVerticalModel m;
  const double dt = 0.05;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> uu(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 7;
    std::vector<double> u(n - 1);
    for (auto& v : u) v = uu(rng);
    std::vector<State> y{{1.0, 0.2}};
    for (int j = 0; j + 1 < n; ++j) {
      const double a = m.nominal_acceleration(u[j]);
      const State p = y.back();
      y.push_back({p.x1 + p.x2 * dt + 0.5 * a * dt * dt, p.x2 + a * dt});
    }
    const auto r = differentiate(y, dt);
    for (int i = 0; i < n; ++i)
      CHECK(r[i].dx2 ==
            doctest::Approx(m.nominal_acceleration(effective_input(u, n, i))).epsilon(1e-9));
  }
  CHECK_THROWS_AS(effective_input({0.5}, 7, 3), std::invalid_argument);
}

TEST_CASE("fan field ramps down to zero at the height scale") {
  CHECK(fan_field({0.2, 0.0}, 44.9) == 0.0);
  CHECK(fan_field({0.0, 0.0}, 45.0) == doctest::Approx(-3.5));
  CHECK(fan_field({0.5, 1.0}, 50.0) == doctest::Approx(-1.75));
  CHECK(fan_field({1.0, 0.0}, 50.0) == 0.0);
  CHECK(fan_field({2.0, 0.0}, 50.0) == 0.0);
  CHECK(fan_field({-0.2, 0.0}, 50.0) == doctest::Approx(-3.5));
}

TEST_CASE("reference waveforms") {
  ReferenceSpec sq;
  CHECK(sq.at(0.0).altitude == 1.5);
  CHECK(sq.at(9.99).altitude == 1.5);
  CHECK(sq.at(10.0).altitude == 0.1);
  CHECK(sq.at(25.0).altitude == 1.5);
  CHECK(sq.at(25.0).velocity == 0.0);
  sq.start_high = false;
  CHECK(sq.at(0.0).altitude == 0.1);

  ReferenceSpec sn;
  sn.kind = ReferenceKind::kSinusoid;
  CHECK(sn.at(5.0).altitude == doctest::Approx(2.4));
  CHECK(sn.at(0.0).velocity == doctest::Approx(2.0 * std::acos(-1.0) / 20.0));
}

TEST_CASE("disturbance spec adds its terms") {
  DisturbanceSpec d;
  d.constant = 0.1;
  d.sin_amplitude = 0.25;
  d.velocity_gain = 0.1;
  const State x{0.6, -1.0};
  CHECK(d.at(x, 0.0) == doctest::Approx(0.1 + 0.25 * std::sin(1.2) - 0.1));
  d.fan.enabled = true;
  CHECK(d.at(x, 50.0) == doctest::Approx(0.1 + 0.25 * std::sin(1.2) - 0.1 - 3.5 * 0.4));
}

TEST_CASE("scenario parser reads keys and reports bad lines") {
  std::istringstream in(
      "# comment\n"
      "name = demo\n"
      "duration = 12.5   # trailing\n"
      "\n"
      "supervisor.mode = local\n"
      "learner.weights = 0,0.1,0,0,0,0,0.4,0.5\n"
      "fan.enabled = true\n");
  const Scenario s = parse_scenario(in, "demo.cfg");
  CHECK(s.name == "demo");
  CHECK(s.duration == 12.5);
  CHECK(s.supervisor.mode == SupervisorMode::kLocal);
  CHECK(s.initial_weights[kPosBelow] == 0.1);
  CHECK(s.initial_weights[kBiasBelow] == 0.5);
  CHECK(s.disturbance.fan.enabled);

  auto line_of = [](const std::string& text) {
    std::istringstream bad(text);
    try {
      parse_scenario(bad, "bad.cfg");
    } catch (const ScenarioParseError& e) {
      CHECK(std::string(e.what()).find("bad.cfg:") == 0);
      return e.line();
    }
    return -1;
  };
  CHECK(line_of("name = a\nbogus.key = 3\n") == 2);
  CHECK(line_of("duration = 1\n\nduration = abc\n") == 3);
  CHECK(line_of("just some words\n") == 1);
  CHECK(line_of("learner.weights = 1,2\n") == 1);
  CHECK(line_of("supervisor.mode = sometimes\n") == 1);
}

TEST_CASE("canonical config round-trips") {
  Scenario s = small_scenario();
  s.supervisor.p = 0.9;
  s.disturbance.sin_amplitude = 0.25;
  set_scenario_key(s, "seed", "17");
  CHECK(s.learner.seed == 17);
  const std::string text = scenario_to_config(s);
  std::istringstream in(text);
  CHECK(scenario_to_config(parse_scenario(in)) == text);
  CHECK_THROWS_AS(set_scenario_key(s, "grid.n1", "many"), std::invalid_argument);
}

TEST_CASE("runs are deterministic for a seed") {
  const Scenario s = small_scenario();
  const GuaranteesPtr prior = scenario_prior(s);
  const ExperimentLog a = run_scenario(s, {prior, {}});
  const ExperimentLog b = run_scenario(s, {prior, {}});
  REQUIRE(a.rows.size() == b.rows.size());
  REQUIRE(a.rows.size() == 120);
  for (std::size_t k = 0; k < a.rows.size(); ++k) {
    CHECK(a.rows[k].x.x1 == b.rows[k].x.x1);
    CHECK(a.rows[k].u == b.rows[k].u);
  }
  Scenario other = s;
  other.seed = 2;
  const ExperimentLog c = run_scenario(other, {prior, {}});
  CHECK(c.rows[10].measured.x1 != a.rows[10].measured.x1);
}

TEST_CASE("residuals of a noiseless run recover the disturbance") {
  Scenario s = small_scenario();
  s.duration = 10.0;
  s.noise_position = 0.0;
  s.noise_velocity = 0.0;
  s.reference.kind = ReferenceKind::kSinusoid;
  s.reference.offset = 1.2;
  s.reference.amplitude = 0.4;
  s.reference.period = 5.0;
  s.disturbance.constant = 0.2;
  s.disturbance.sin_amplitude = 0.25;
  s.disturbance.velocity_gain = 0.1;
  const ExperimentLog log = run_scenario(s);
  REQUIRE(log.observations.size() > 150);
  double bias = 0.0;
  for (const auto& o : log.observations)
    bias += o.d_hat - s.disturbance.at({o.x1, o.x2}, o.t);
  bias /= static_cast<double>(log.observations.size());
  CHECK(std::abs(bias) < 0.02);
}

TEST_CASE("violations are counted on the true state") {
  Scenario s = small_scenario();
  s.initial = {0.9, 0.0};
  s.initial_weights = {};
  s.supervisor.mode = SupervisorMode::kNone;
  const ExperimentLog log = run_scenario(s);
  int outside = 0;
  for (const auto& r : log.rows)
    if (!s.constraint.contains(r.x)) ++outside;
  CHECK(outside > 0);
  CHECK(static_cast<int>(log.violations.size()) == outside);
  for (const auto& v : log.violations) CHECK(v.x.x1 < s.constraint.floor);
  CHECK(log.overrides(0.0, 100.0) == 0);

  s.supervisor.mode = SupervisorMode::kBoundary;
  const ExperimentLog safe = run_scenario(s);
  CHECK(safe.violations.empty());
  CHECK(safe.overrides(0.0, 5.0) > 0);
}

TEST_CASE("learning from zero weights improves tracking in most seeds") {
  Scenario s = load_scenario(SAFELEARN_SCENARIO_DIR "/fall_to_flight.cfg");
  s.duration = 30.0;
  s.grid_n1 = 81;
  s.grid_n2 = 81;
  const GuaranteesPtr prior = scenario_prior(s);
  auto mean_error = [](const ExperimentLog& log, int first, int last) {
    double sum = 0.0;
    int n = 0;
    for (const auto& e : log.episodes)
      if (e.index >= first && e.index < last && std::isfinite(e.mean_abs_error)) {
        sum += e.mean_abs_error;
        ++n;
      }
    return n > 0 ? sum / n : std::nan("");
  };
  int improved = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    s.seed = seed;
    s.learner.seed = seed;
    const ExperimentLog log = run_scenario(s, {prior, {}});
    CHECK(log.violations.empty());
    if (mean_error(log, 20, 30) < mean_error(log, 0, 10)) ++improved;
  }
  CHECK(improved >= 8);
}

TEST_CASE("tracking error and override counters use half-open windows") {
  ExperimentLog log;
  for (int k = 0; k < 4; ++k) {
    LogRow r{};
    r.t = k;
    r.x = {1.0 + 0.1 * k, 0.0};
    r.ref = 1.0;
    r.source = k % 2 ? ActionSource::kSafety : ActionSource::kLearner;
    r.reason = k % 2 ? OverrideReason::kBoundary : OverrideReason::kNone;
    log.rows.push_back(r);
  }
  CHECK(log.mean_tracking_error(1.0, 3.0) == doctest::Approx(0.15));
  CHECK(log.overrides(0.0, 3.0) == 1);
  CHECK(log.overrides(0.0, 4.0, OverrideReason::kBoundary) == 2);
  CHECK(std::isnan(log.mean_tracking_error(10.0, 11.0)));
}
