#include "safelearn/sim.h"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "safelearn/reach_io.h"

namespace safelearn {

// ---------------------------------------------------------------- reference

ReferencePoint ReferenceSpec::at(double t) const {
  switch (kind) {
    case ReferenceKind::kSquare: {
      const bool first = std::fmod(std::floor(t / half_period), 2.0) == 0.0;
      return {first == start_high ? high : low, 0.0};
    }
    case ReferenceKind::kSinusoid: {
      const double w = 2.0 * std::numbers::pi / period;
      return {offset + amplitude * std::sin(w * t),
              amplitude * w * std::cos(w * t)};
    }
    case ReferenceKind::kConstant:
      return {offset, 0.0};
  }
  return {};
}

void ReferenceSpec::validate() const {
  if (kind == ReferenceKind::kSquare && !(half_period > 0.0))
    throw std::invalid_argument("reference.half_period must be positive");
  if (kind == ReferenceKind::kSinusoid && !(period > 0.0))
    throw std::invalid_argument("reference.period must be positive");
}

// -------------------------------------------------------------- disturbance

double fan_field(const State& x, double t, double amplitude,
                 double height_scale, double t_on) {
  if (t < t_on) return 0.0;
  return -amplitude * std::clamp(1.0 - x.x1 / height_scale, 0.0, 1.0);
}

double DisturbanceSpec::at(const State& x, double t) const {
  double d = constant + sin_amplitude * std::sin(sin_frequency * x.x1) +
             velocity_gain * x.x2;
  if (fan.enabled) d += fan_field(x, t, fan.amplitude, fan.height_scale, fan.t_on);
  return d;
}

double DisturbanceSpec::magnitude_bound(double, double, double speed) const {
  double b = std::abs(constant) + std::abs(sin_amplitude) +
             std::abs(velocity_gain) * speed;
  if (fan.enabled) b += std::abs(fan.amplitude);
  return b;
}

// ----------------------------------------------------------------- scenario

AffineVerticalModel Scenario::model() const {
  return AffineVerticalModel(k_thrust, k_offset, u_min, u_max);
}

Grid2D Scenario::grid() const {
  return Grid2D(grid_x1_min, grid_x1_max, grid_n1, grid_x2_min, grid_x2_max,
                grid_n2);
}

void Scenario::validate() const {
  if (name.empty() || name.find('/') != std::string::npos)
    throw std::invalid_argument("name must be non-empty and contain no '/'");
  if (!(duration > 0.0)) throw std::invalid_argument("duration must be positive");
  if (!(control_dt > 0.0) || substeps < 1)
    throw std::invalid_argument("control_dt must be positive and substeps >= 1");
  if (observation_delay < 3)
    throw std::invalid_argument("observation_delay must be >= 3 (derivative window)");
  if (!(noise_position >= 0.0) || !(noise_velocity >= 0.0))
    throw std::invalid_argument("noise levels must be >= 0");
  if (!(constraint.floor < constraint.ceiling))
    throw std::invalid_argument("constraint.floor must lie below constraint.ceiling");
  if (!initial.finite()) throw std::invalid_argument("initial state must be finite");
  if (!(prior_half_width > 0.0))
    throw std::invalid_argument("prior.half_width must be positive");
  model();
  grid();
  reference.validate();
  supervisor.validate();
  learner.validate();
  Hyperparams h = gp_shape;
  h.sigma_f2 = 1.0;
  h.validate();
  for (double w : initial_weights)
    if (!std::isfinite(w)) throw std::invalid_argument("weights must be finite");
}

ScenarioParseError::ScenarioParseError(const std::string& source, int line,
                                       const std::string& msg)
    : std::runtime_error(source + ":" + std::to_string(line) + ": " + msg),
      line_(line) {}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
    throw std::invalid_argument("expected a number, got '" + v + "'");
  return out;
}

long long to_integer(const std::string& v) {
  long long out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw std::invalid_argument("expected an integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "on" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "off" || v == "no" || v == "0") return false;
  throw std::invalid_argument("expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

struct Key {
  const char* name;
  std::function<void(Scenario&, const std::string&)> set;
  std::function<std::string(const Scenario&)> get;
};

template <class M>
Key number(const char* name, M member) {
  return {name,
          [member](Scenario& s, const std::string& v) { member(s) = to_double(v); },
          [member](const Scenario& s) {
            return fmt(member(const_cast<Scenario&>(s)));
          }};
}

template <class M>
Key integer(const char* name, M member, long long lo) {
  return {name,
          [member, lo, name](Scenario& s, const std::string& v) {
            const long long x = to_integer(v);
            if (x < lo)
              throw std::invalid_argument(std::string(name) + " must be >= " +
                                          std::to_string(lo));
            member(s) = static_cast<std::remove_reference_t<decltype(member(s))>>(x);
          },
          [member](const Scenario& s) {
            return std::to_string(member(const_cast<Scenario&>(s)));
          }};
}

template <class M>
Key boolean(const char* name, M member) {
  return {name,
          [member](Scenario& s, const std::string& v) { member(s) = to_bool(v); },
          [member](const Scenario& s) {
            return std::string(member(const_cast<Scenario&>(s)) ? "true" : "false");
          }};
}

#define FIELD(expr) [](Scenario& s) -> auto& { return expr; }

const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      {"name", [](Scenario& s, const std::string& v) { s.name = v; },
       [](const Scenario& s) { return s.name; }},
      number("duration", FIELD(s.duration)),
      integer("seed", FIELD(s.seed), 0),
      number("control_dt", FIELD(s.control_dt)),
      integer("substeps", FIELD(s.substeps), 1),
      integer("observation_delay", FIELD(s.observation_delay), 3),
      number("model.k_thrust", FIELD(s.k_thrust)),
      number("model.k_offset", FIELD(s.k_offset)),
      number("model.u_min", FIELD(s.u_min)),
      number("model.u_max", FIELD(s.u_max)),
      number("grid.x1_min", FIELD(s.grid_x1_min)),
      number("grid.x1_max", FIELD(s.grid_x1_max)),
      integer("grid.n1", FIELD(s.grid_n1), Grid2D::kMinNodes),
      number("grid.x2_min", FIELD(s.grid_x2_min)),
      number("grid.x2_max", FIELD(s.grid_x2_max)),
      integer("grid.n2", FIELD(s.grid_n2), Grid2D::kMinNodes),
      number("constraint.floor", FIELD(s.constraint.floor)),
      number("constraint.ceiling", FIELD(s.constraint.ceiling)),
      number("initial.x1", FIELD(s.initial.x1)),
      number("initial.x2", FIELD(s.initial.x2)),
      number("noise.position", FIELD(s.noise_position)),
      number("noise.velocity", FIELD(s.noise_velocity)),
      {"reference.kind",
       [](Scenario& s, const std::string& v) {
         if (v == "square") s.reference.kind = ReferenceKind::kSquare;
         else if (v == "sinusoid") s.reference.kind = ReferenceKind::kSinusoid;
         else if (v == "constant") s.reference.kind = ReferenceKind::kConstant;
         else throw std::invalid_argument("reference.kind must be square, sinusoid or constant");
       },
       [](const Scenario& s) -> std::string {
         switch (s.reference.kind) {
           case ReferenceKind::kSquare: return "square";
           case ReferenceKind::kSinusoid: return "sinusoid";
           case ReferenceKind::kConstant: return "constant";
         }
         return "";
       }},
      number("reference.high", FIELD(s.reference.high)),
      number("reference.low", FIELD(s.reference.low)),
      number("reference.half_period", FIELD(s.reference.half_period)),
      {"reference.start",
       [](Scenario& s, const std::string& v) {
         if (v != "high" && v != "low")
           throw std::invalid_argument("reference.start must be high or low");
         s.reference.start_high = v == "high";
       },
       [](const Scenario& s) -> std::string {
         return s.reference.start_high ? "high" : "low";
       }},
      number("reference.offset", FIELD(s.reference.offset)),
      number("reference.amplitude", FIELD(s.reference.amplitude)),
      number("reference.period", FIELD(s.reference.period)),
      number("disturbance.constant", FIELD(s.disturbance.constant)),
      number("disturbance.sin_amplitude", FIELD(s.disturbance.sin_amplitude)),
      number("disturbance.sin_frequency", FIELD(s.disturbance.sin_frequency)),
      number("disturbance.velocity_gain", FIELD(s.disturbance.velocity_gain)),
      boolean("fan.enabled", FIELD(s.disturbance.fan.enabled)),
      number("fan.amplitude", FIELD(s.disturbance.fan.amplitude)),
      number("fan.height_scale", FIELD(s.disturbance.fan.height_scale)),
      number("fan.t_on", FIELD(s.disturbance.fan.t_on)),
      number("prior.half_width", FIELD(s.prior_half_width)),
      number("gp.sigma_n2", FIELD(s.gp_shape.sigma_n2)),
      number("gp.lambda1", FIELD(s.gp_shape.lambda1)),
      number("gp.lambda2", FIELD(s.gp_shape.lambda2)),
      {"supervisor.mode",
       [](Scenario& s, const std::string& v) {
         s.supervisor.mode = supervisor_mode_from_string(v);
       },
       [](const Scenario& s) { return std::string(to_string(s.supervisor.mode)); }},
      number("supervisor.p", FIELD(s.supervisor.p)),
      number("supervisor.lambda0", FIELD(s.supervisor.lambda0)),
      number("supervisor.gamma0", FIELD(s.supervisor.gamma0)),
      number("supervisor.recompute_period", FIELD(s.supervisor.recompute_period)),
      integer("supervisor.recomputes", FIELD(s.supervisor.max_recomputes), 0),
      number("supervisor.recompute_latency", FIELD(s.supervisor.recompute_latency)),
      boolean("supervisor.conservative", FIELD(s.supervisor.conservative)),
      number("supervisor.lookahead", FIELD(s.supervisor.lookahead)),
      number("supervisor.margin", FIELD(s.supervisor.margin)),
      integer("supervisor.gamma_stride", FIELD(s.supervisor.gamma_stride), 1),
      integer("supervisor.levels", FIELD(s.supervisor.sampling.levels), 1),
      integer("supervisor.points", FIELD(s.supervisor.sampling.points), 1),
      number("reach.cfl", FIELD(s.supervisor.scheme.cfl)),
      number("reach.tolerance", FIELD(s.supervisor.scheme.tolerance)),
      number("reach.horizon", FIELD(s.supervisor.scheme.horizon)),
      {"reach.scheme",
       [](Scenario& s, const std::string& v) {
         s.supervisor.scheme.spatial = spatial_scheme_from_string(v);
       },
       [](const Scenario& s) {
         return std::string(to_string(s.supervisor.scheme.spatial));
       }},
      boolean("learner.learning", FIELD(s.learner.learning)),
      number("learner.delta", FIELD(s.learner.delta)),
      number("learner.step", FIELD(s.learner.step)),
      boolean("learner.normalize", FIELD(s.learner.normalize)),
      {"learner.estimator",
       [](Scenario& s, const std::string& v) {
         s.learner.estimator = gradient_estimator_from_string(v);
       },
       [](const Scenario& s) { return std::string(to_string(s.learner.estimator)); }},
      number("learner.horizon", FIELD(s.learner.horizon)),
      number("learner.derivative_time", FIELD(s.learner.derivative_time)),
      number("learner.episode_length", FIELD(s.learner.episode_length)),
      integer("learner.batch", FIELD(s.learner.batch), 2),
      number("learner.integral_clamp", FIELD(s.learner.integral_clamp)),
      {"learner.weights",
       [](Scenario& s, const std::string& v) {
         std::vector<double> w;
         std::stringstream ss(v);
         std::string item;
         while (std::getline(ss, item, ',')) w.push_back(to_double(trim(item)));
         if (w.size() != kFeatureCount)
           throw std::invalid_argument("learner.weights needs " +
                                       std::to_string(kFeatureCount) + " values");
         std::copy(w.begin(), w.end(), s.initial_weights.begin());
       },
       [](const Scenario& s) {
         std::string out;
         for (std::size_t k = 0; k < kFeatureCount; ++k)
           out += (k ? "," : "") + fmt(s.initial_weights[k]);
         return out;
       }},
  };
  return k;
}

#undef FIELD

}  // namespace

void set_scenario_key(Scenario& s, const std::string& key, const std::string& value) {
  for (const Key& k : keys()) {
    if (key == k.name) {
      k.set(s, value);
      if (key == "seed") s.learner.seed = s.seed;
      return;
    }
  }
  throw std::invalid_argument("unknown key '" + key + "'");
}

std::string scenario_to_config(const Scenario& s) {
  std::string out;
  for (const Key& k : keys()) out += std::string(k.name) + " = " + k.get(s) + "\n";
  return out;
}

Scenario parse_scenario(std::istream& in, const std::string& source) {
  Scenario s;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ScenarioParseError(source, n, "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ScenarioParseError(source, n, "missing key");
    if (value.empty()) throw ScenarioParseError(source, n, "missing value for " + key);
    try {
      set_scenario_key(s, key, value);
    } catch (const std::exception& e) {
      throw ScenarioParseError(source, n, e.what());
    }
  }
  try {
    s.validate();
  } catch (const std::exception& e) {
    throw ScenarioParseError(source, n, e.what());
  }
  return s;
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scenario " + path.string());
  return parse_scenario(in, path.string());
}

// ---------------------------------------------------------- differentiation

namespace {

// Weights of raw derivative j over samples (central, or one-sided at ends).
int window_radius(std::size_t n, std::size_t i) {
  return static_cast<int>(std::min<std::size_t>({2, i, n - 1 - i}));
}

}  // namespace

std::vector<StateRate> differentiate(const std::vector<State>& y, double dt) {
  const std::size_t n = y.size();
  if (n < 3) throw std::invalid_argument("differentiate needs at least 3 samples");
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  std::vector<StateRate> raw(n);
  raw[0] = {(-3 * y[0].x1 + 4 * y[1].x1 - y[2].x1) / (2 * dt),
            (-3 * y[0].x2 + 4 * y[1].x2 - y[2].x2) / (2 * dt)};
  raw[n - 1] = {(3 * y[n - 1].x1 - 4 * y[n - 2].x1 + y[n - 3].x1) / (2 * dt),
                (3 * y[n - 1].x2 - 4 * y[n - 2].x2 + y[n - 3].x2) / (2 * dt)};
  for (std::size_t j = 1; j + 1 < n; ++j)
    raw[j] = {(y[j + 1].x1 - y[j - 1].x1) / (2 * dt),
              (y[j + 1].x2 - y[j - 1].x2) / (2 * dt)};
  std::vector<StateRate> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int r = window_radius(n, i);
    StateRate acc;
    for (int k = -r; k <= r; ++k) {
      acc.dx1 += raw[i + k].dx1;
      acc.dx2 += raw[i + k].dx2;
    }
    out[i] = {acc.dx1 / (2 * r + 1), acc.dx2 / (2 * r + 1)};
  }
  return out;
}

double effective_input(const std::vector<double>& u, std::size_t n, std::size_t i) {
  if (n < 3 || i >= n) throw std::invalid_argument("effective_input: bad index");
  if (u.size() + 1 < n) throw std::invalid_argument("effective_input: too few inputs");
  // Each raw derivative is a combination of the interval-average accelerations.
  auto raw = [&](std::size_t j) {
    if (j == 0) return 1.5 * u[0] - 0.5 * u[1];
    if (j == n - 1) return 1.5 * u[n - 2] - 0.5 * u[n - 3];
    return 0.5 * (u[j - 1] + u[j]);
  };
  const int r = window_radius(n, i);
  double s = 0.0;
  for (int k = -r; k <= r; ++k) s += raw(i + k);
  return s / (2 * r + 1);
}

// ---------------------------------------------------------------------- log

void ExperimentLog::write_csv(std::ostream& out) const {
  out << "t,x1,x2,u,source,V,lambda,gamma_lower,version,override_reason,ref\n";
  auto num = [](double v) { return std::isnan(v) ? std::string() : fmt(v); };
  for (const LogRow& r : rows) {
    out << fmt(r.t) << ',' << fmt(r.x.x1) << ',' << fmt(r.x.x2) << ','
        << fmt(r.u) << ',' << to_string(r.source) << ',' << num(r.value) << ','
        << num(r.lambda) << ',' << num(r.gamma) << ',' << r.version << ','
        << to_string(r.reason) << ',' << fmt(r.ref) << '\n';
  }
}

double ExperimentLog::mean_tracking_error(double t0, double t1) const {
  double s = 0.0;
  int n = 0;
  for (const LogRow& r : rows) {
    if (r.t < t0 || r.t >= t1) continue;
    s += std::abs(r.x.x1 - r.ref);
    ++n;
  }
  return n ? s / n : std::nan("");
}

int ExperimentLog::overrides(double t0, double t1, OverrideReason reason) const {
  int n = 0;
  for (const LogRow& r : rows)
    if (r.t >= t0 && r.t < t1 && r.reason == reason) ++n;
  return n;
}

int ExperimentLog::overrides(double t0, double t1) const {
  int n = 0;
  for (const LogRow& r : rows)
    if (r.t >= t0 && r.t < t1 && r.source == ActionSource::kSafety) ++n;
  return n;
}

// ---------------------------------------------------------------- simulate

GuaranteesPtr scenario_prior(const Scenario& s) {
  return prior_guarantees(s.model(), s.grid(), s.constraint, s.prior_half_width,
                          s.gp_shape, s.supervisor.p, s.supervisor.scheme);
}

ExperimentLog run_scenario(const Scenario& s, const RunOptions& opt) {
  s.validate();
  const auto wall0 = std::chrono::steady_clock::now();
  const AffineVerticalModel model = s.model();
  GuaranteesPtr prior = opt.prior ? opt.prior : scenario_prior(s);
  if (!(prior->value.grid == s.grid()))
    throw std::invalid_argument("supplied prior guarantees use a different grid");

  SupervisorConfig cfg = s.supervisor;
  cfg.mvn.seed = s.seed;
  Supervisor sup(cfg, model, prior);
  LearnerConfig lcfg = s.learner;
  lcfg.seed = s.seed;
  PolicyGradientLearner learner(lcfg, s.initial_weights, model.u_min(),
                                model.u_max());

  ExperimentLog log;
  log.scenario = s.name;
  log.seed = s.seed;
  log.versions.push_back({0.0, prior});

  std::mt19937_64 rng(s.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double dt = s.control_dt;
  const double h = dt / s.substeps;
  const long steps = std::lround(s.duration / dt);
  const int delay = s.observation_delay;
  const std::size_t window = 2 * delay + 1;

  // Recent measurements and applied controls for the derivative window.
  std::vector<State> hist_y;
  std::vector<double> hist_u;
  State x = s.initial;
  for (long k = 0; k < steps; ++k) {
    const double t = k * dt;
    const State y{x.x1 + s.noise_position * gauss(rng),
                  x.x2 + s.noise_velocity * gauss(rng)};
    hist_y.push_back(y);
    if (hist_y.size() > window) {
      hist_y.erase(hist_y.begin());
      hist_u.erase(hist_u.begin());
    }
    if (hist_y.size() == window) {
      const auto rates = differentiate(hist_y, dt);
      const std::size_t c = delay;
      const double u_eff = effective_input(hist_u, window, c);
      const double tc = (k - delay) * dt;
      sup.ingest_observation(tc, hist_y[c], u_eff, rates[c]);
      log.observations.push_back({tc, hist_y[c].x1, hist_y[c].x2, u_eff,
                                  rates[c].dx2, sup.buffer().targets.back()});
    }
    if (sup.tick(t)) log.versions.push_back({t, sup.snapshot()});

    const ReferencePoint ref = s.reference.at(t);
    const double ul = learner.act(t, y, ref, dt);
    const Decision d = sup.select_action(y, ul);
    learner.observe(d.source == ActionSource::kLearner);

    LogRow row{t, x, y, d.u, d.source, d.reason, d.value, d.lambda,
               d.gamma, d.version, ref.altitude};
    if (!s.constraint.contains(x)) log.violations.push_back({t, x});
    if (opt.on_row) opt.on_row(row);
    log.rows.push_back(row);

    hist_u.push_back(d.u);
    for (int j = 0; j < s.substeps; ++j) {
      const double dist = s.disturbance.at(x, t + j * h);
      x = rk4_step(model, x, d.u, dist, h);
      if (!x.finite())
        throw NumericalBlowup("state diverged at t = " + std::to_string(t + (j + 1) * h));
    }
  }
  // A recompute still in flight is abandoned with the run.
  log.episodes = learner.episodes();
  log.final_weights = learner.weights();
  log.recompute_failures = sup.failures();
  log.wall_seconds = std::chrono::duration<double>(
                         std::chrono::steady_clock::now() - wall0)
                         .count();
  return log;
}

std::filesystem::path run_directory(const std::filesystem::path& root,
                                    const Scenario& s) {
  return root / (s.name + "_seed" + std::to_string(s.seed));
}

std::vector<std::filesystem::path> write_run_outputs(
    const ExperimentLog& log, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "versions");
  std::vector<fs::path> written;
  auto open = [&](const fs::path& p, std::ios::openmode mode = std::ios::out) {
    std::ofstream f(p, mode | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    written.push_back(p);
    return f;
  };
  {
    auto f = open(dir / "log.csv");
    log.write_csv(f);
  }
  {
    auto f = open(dir / "violations.csv");
    f << "t,x1,x2\n";
    for (const auto& v : log.violations)
      f << fmt(v.t) << ',' << fmt(v.x.x1) << ',' << fmt(v.x.x2) << '\n';
  }
  {
    auto f = open(dir / "observations.csv");
    write_dataset_csv(f, log.observations);
  }
  {
    auto f = open(dir / "episodes.jsonl");
    for (const auto& e : log.episodes) f << episode_to_json(e) << '\n';
  }
  {
    auto f = open(dir / "weights.json");
    f << weights_to_json(log.final_weights) << '\n';
  }
  {
    auto f = open(dir / "versions.csv");
    f << "version,installed_at,data_until,safe_area,converged\n";
    for (const auto& v : log.versions)
      f << v.guarantees->version << ',' << fmt(v.installed_at) << ','
        << fmt(v.guarantees->data_until) << ','
        << fmt(v.guarantees->value.safe_area()) << ','
        << (v.guarantees->value.converged ? "true" : "false") << '\n';
  }
  for (const auto& v : log.versions) {
    auto f = open(dir / "versions" / ("v" + std::to_string(v.guarantees->version) + ".grid"),
                  std::ios::out | std::ios::binary);
    write_value_grid(f, {v.guarantees->value, v.guarantees->policy},
                     v.guarantees->version);
  }
  return written;
}

}  // namespace safelearn
