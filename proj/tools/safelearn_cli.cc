#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "safelearn/gp.h"
#include "safelearn/reach_io.h"
#include "safelearn/sim.h"
#include "safelearn/special_functions.h"

namespace fs = std::filesystem;
using namespace safelearn;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitViolation = 2;

std::string sha256(const std::string& text) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr);
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i)
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return out.str();
}

fs::path default_root() {
  if (const char* env = std::getenv("SAFELEARN_OUT"); env && *env) return env;
  return "runs";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::trunc | std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

// `config` is the canonical input text; the manifest embeds it so the run can
// be repeated from the manifest alone.
void write_manifest(const fs::path& dir, const std::string& command,
                    const std::string& config, std::uint64_t seed,
                    const std::vector<fs::path>& outputs, double seconds,
                    json extra = json::object()) {
  json m;
  m["tool"] = "safelearn";
  m["tool_version"] = SAFELEARN_VERSION;
  m["command"] = command;
  m["config"] = config;
  m["config_hash"] = "sha256:" + sha256(config);
  m["seed"] = seed;
  json out = json::array();
  for (const auto& p : outputs) out.push_back(fs::relative(p, dir).generic_string());
  m["outputs"] = out;
  m["timing"] = {{"wall_seconds", seconds}};
  m["summary"] = std::move(extra);
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

std::pair<int, int> parse_grid(const std::string& spec) {
  const auto comma = spec.find(',');
  if (comma == std::string::npos)
    throw std::invalid_argument("--grid expects NX,NY");
  return {std::stoi(spec.substr(0, comma)), std::stoi(spec.substr(comma + 1))};
}

std::pair<double, double> parse_pair(const std::string& spec, const char* what) {
  const auto comma = spec.find(',');
  if (comma == std::string::npos)
    throw std::invalid_argument(std::string(what) + " expects A,B");
  return {std::stod(spec.substr(0, comma)), std::stod(spec.substr(comma + 1))};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ------------------------------------------------------------------ run

struct RunArgs {
  std::string scenario;
  std::string mode, grid, out;
  double p = 0, lambda0 = 0, gamma0 = 0;
  long long seed = -1;
  std::vector<std::string> sets;
  bool quiet = false;
};

int cmd_run(const RunArgs& a, CLI::App& app) {
  const auto t0 = std::chrono::steady_clock::now();
  Scenario s = load_scenario(a.scenario);
  auto set = [&](const char* key, const std::string& v) { set_scenario_key(s, key, v); };
  if (!a.mode.empty()) set("supervisor.mode", a.mode);
  if (app.count("--p")) set("supervisor.p", std::to_string(a.p));
  if (app.count("--lambda0")) set("supervisor.lambda0", std::to_string(a.lambda0));
  if (app.count("--gamma0")) set("supervisor.gamma0", std::to_string(a.gamma0));
  if (a.seed >= 0) set("seed", std::to_string(a.seed));
  if (!a.grid.empty()) {
    auto [nx, ny] = parse_grid(a.grid);
    set("grid.n1", std::to_string(nx));
    set("grid.n2", std::to_string(ny));
  }
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value");
    set_scenario_key(s, kv.substr(0, eq), kv.substr(eq + 1));
  }
  s.validate();

  const fs::path dir = run_directory(a.out.empty() ? default_root() : fs::path(a.out), s);
  RunOptions opt;
  const ExperimentLog log = run_scenario(s, opt);
  auto outputs = write_run_outputs(log, dir);
  const std::string config = scenario_to_config(s);
  write_text(dir / "scenario.cfg", config);
  outputs.push_back(dir / "scenario.cfg");

  json summary;
  summary["violations"] = log.violations.size();
  summary["overrides"] = log.overrides(0, 1e300);
  summary["versions"] = log.versions.size();
  summary["recompute_failures"] = log.recompute_failures;
  summary["mean_tracking_error"] = log.mean_tracking_error(0, 1e300);
  summary["simulation_seconds"] = log.wall_seconds;
  write_manifest(dir, "run", config, s.seed, outputs, seconds_since(t0), summary);

  if (!a.quiet) {
    std::cout << "scenario " << s.name << " seed " << s.seed << " mode "
              << to_string(s.supervisor.mode) << "\n"
              << "  violations " << log.violations.size() << ", overrides "
              << log.overrides(0, 1e300) << ", versions " << log.versions.size()
              << ", mean |e| " << log.mean_tracking_error(0, 1e300) << "\n"
              << "  output " << dir.string() << "\n";
    for (const auto& f : log.recompute_failures)
      std::cerr << "warning: recompute failed: " << f << "\n";
  }
  return log.violations.empty() ? kExitOk : kExitViolation;
}

// ---------------------------------------------------------------- reach

struct ReachArgs {
  double k_thrust = 20, k_offset = 0, u_min = 0, u_max = 1;
  double bound = 1.5;
  std::string bound_range, bound_file;
  std::string grid = "161,161", x1_range = "-0.5,3.3", x2_range = "-3,3";
  double floor = 0, ceiling = 2.8;
  double cfl = 0.5, tolerance = 1e-4, horizon = 10;
  std::string scheme = "weno5";
  std::string out;
};

int cmd_reach(const ReachArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const AffineVerticalModel model(a.k_thrust, a.k_offset, a.u_min, a.u_max);
  auto [nx, ny] = parse_grid(a.grid);
  auto [x1a, x1b] = parse_pair(a.x1_range, "--x1-range");
  auto [x2a, x2b] = parse_pair(a.x2_range, "--x2-range");
  const Grid2D grid(x1a, x1b, nx, x2a, x2b, ny);
  SchemeParams sp;
  sp.cfl = a.cfl;
  sp.tolerance = a.tolerance;
  sp.horizon = a.horizon;
  sp.spatial = spatial_scheme_from_string(a.scheme);

  json cfg;
  cfg["model"] = {{"k_thrust", a.k_thrust}, {"k_offset", a.k_offset},
                  {"u_min", a.u_min}, {"u_max", a.u_max}};
  cfg["grid"] = {{"spec", a.grid}, {"x1_range", a.x1_range}, {"x2_range", a.x2_range}};
  cfg["constraint"] = {{"floor", a.floor}, {"ceiling", a.ceiling}};
  cfg["scheme"] = {{"cfl", a.cfl}, {"tolerance", a.tolerance},
                   {"horizon", a.horizon}, {"spatial", a.scheme}};

  DisturbanceBound bound = DisturbanceBound::constant(-a.bound, a.bound);
  if (!a.bound_file.empty()) {
    std::ifstream in(a.bound_file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + a.bound_file);
    BoundFile bf = read_bound(in);
    if (!(*bf.bound.grid() == grid))
      throw std::invalid_argument("bound file grid differs from --grid/--x1-range/--x2-range");
    bound = bf.bound;
    cfg["bound"] = {{"file", a.bound_file}, {"sha256", sha256(slurp(a.bound_file))}};
  } else if (!a.bound_range.empty()) {
    auto [lo, hi] = parse_pair(a.bound_range, "--bound-range");
    bound = DisturbanceBound::constant(lo, hi);
    cfg["bound"] = {{"lower", lo}, {"upper", hi}};
  } else {
    cfg["bound"] = {{"lower", -a.bound}, {"upper", a.bound}};
  }

  const ReachSolution sol = solve_hji(model, grid, {a.floor, a.ceiling}, bound, sp);
  const fs::path dir = a.out.empty() ? default_root() / "reach" : fs::path(a.out);
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "value.grid", std::ios::binary | std::ios::trunc);
    write_value_grid(f, sol);
  }
  {
    std::ofstream f(dir / "contour.csv", std::ios::trunc);
    write_contour_csv(f, sol.value, 0.0);
  }
  const bool empty = sol.value.max_value() < 0.0;
  json summary = {{"converged", sol.value.converged},
                  {"steps", sol.value.steps},
                  {"horizon_used", sol.value.horizon_used},
                  {"safe_area", sol.value.safe_area()},
                  {"max_value", sol.value.max_value()},
                  {"empty", empty}};
  write_manifest(dir, "reach", cfg.dump(), 0, {dir / "value.grid", dir / "contour.csv"},
                 seconds_since(t0), summary);
  std::cout << "converged " << (sol.value.converged ? "true" : "false") << " after "
            << sol.value.steps << " steps (tau " << sol.value.horizon_used << ")\n"
            << "safe area " << sol.value.safe_area() << ", max V " << sol.value.max_value()
            << "\n";
  if (empty) std::cout << "safe set is empty\n";
  std::cout << "output " << dir.string() << "\n";
  return sol.value.converged ? kExitOk : kExitError;
}

// ------------------------------------------------------------------- gp

struct GpArgs {
  std::string data, theta_file, query, out, grid = "161,161",
      x1_range = "-0.5,3.3", x2_range = "-3,3";
  Hyperparams theta;
  double p = 0.95;
  long long seed = 7;
  int starts = 5;
};

Hyperparams load_theta(const GpArgs& a) {
  if (a.theta_file.empty()) return a.theta;
  const json j = json::parse(slurp(a.theta_file));
  const json& t = j.contains("theta") ? j.at("theta") : j;
  Hyperparams h{t.at("sigma_f2").get<double>(), t.at("sigma_n2").get<double>(),
                t.at("lambda1").get<double>(), t.at("lambda2").get<double>()};
  h.validate();
  return h;
}

json theta_json(const Hyperparams& h) {
  return {{"sigma_f2", h.sigma_f2}, {"sigma_n2", h.sigma_n2},
          {"lambda1", h.lambda1}, {"lambda2", h.lambda2}};
}

// Inputs are read once so that pipes work as well as files.
struct GpInputs {
  std::string data;
  std::string query;
};

json gp_config(const GpArgs& a, const GpInputs& in, const std::string& sub,
               const Hyperparams& th) {
  json c;
  c["subcommand"] = sub;
  c["data"] = a.data;
  c["data_sha256"] = sha256(in.data);
  c["theta"] = theta_json(th);
  if (sub == "fit") c["fit"] = {{"seed", a.seed}, {"starts", a.starts}};
  if (sub == "bound") c["p"] = a.p;
  if (sub != "fit")
    c["grid"] = {{"spec", a.grid}, {"x1_range", a.x1_range}, {"x2_range", a.x2_range}};
  if (!a.query.empty()) {
    c["query"] = a.query;
    c["query_sha256"] = sha256(in.query);
  }
  return c;
}

Grid2D gp_grid(const GpArgs& a) {
  auto [nx, ny] = parse_grid(a.grid);
  auto [x1a, x1b] = parse_pair(a.x1_range, "--x1-range");
  auto [x2a, x2b] = parse_pair(a.x2_range, "--x2-range");
  return Grid2D(x1a, x1b, nx, x2a, x2b, ny);
}

int cmd_gp(const std::string& sub, const GpArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const GpInputs inputs{slurp(a.data), a.query.empty() ? "" : slurp(a.query)};
  std::istringstream data_in(inputs.data);
  const Dataset data = to_dataset(read_dataset_csv(data_in));
  const Hyperparams init = load_theta(a);
  const fs::path dir = a.out.empty() ? default_root() / ("gp_" + sub) : fs::path(a.out);
  fs::create_directories(dir);
  const std::string config = gp_config(a, inputs, sub, init).dump();
  std::vector<fs::path> outputs;
  json summary;

  if (sub == "fit") {
    FitOptions fo;
    fo.seed = static_cast<std::uint64_t>(a.seed);
    fo.starts = a.starts;
    const FitResult r = fit_hyperparameters(data, init, fo);
    json j = {{"theta", theta_json(r.theta)},
              {"log_likelihood", r.log_likelihood},
              {"initial_log_likelihood", r.initial_log_likelihood},
              {"evaluations", r.evaluations},
              {"n", data.size()}};
    write_text(dir / "theta.json", j.dump(2) + "\n");
    outputs.push_back(dir / "theta.json");
    summary = j;
    std::cout << "theta sigma_f2 " << r.theta.sigma_f2 << " sigma_n2 " << r.theta.sigma_n2
              << " lambda1 " << r.theta.lambda1 << " lambda2 " << r.theta.lambda2 << "\n"
              << "log likelihood " << r.log_likelihood << " (start "
              << r.initial_log_likelihood << ")\n";
  } else if (sub == "predict") {
    std::vector<State> q;
    if (!a.query.empty()) {
      std::istringstream in(inputs.query);
      std::string line;
      std::getline(in, line);
      if (line.rfind("x1,x2", 0) != 0)
        throw std::invalid_argument(a.query + ":1: expected header x1,x2");
      int n = 1;
      while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
          auto [x1, x2] = parse_pair(line, "query row");
          q.push_back({x1, x2});
        } catch (const std::exception&) {
          throw std::invalid_argument(a.query + ":" + std::to_string(n) + ": bad row");
        }
      }
    } else {
      const Grid2D g = gp_grid(a);
      for (int i = 0; i < g.n1(); ++i)
        for (int j = 0; j < g.n2(); ++j) q.push_back(g.node(i, j));
    }
    const Posterior post(init, data);
    const Prediction pr = posterior_predict(post, q);
    std::ofstream f(dir / "predictions.csv", std::ios::trunc);
    f << "x1,x2,mean,variance\n" << std::setprecision(17);
    for (std::size_t k = 0; k < q.size(); ++k)
      f << q[k].x1 << ',' << q[k].x2 << ',' << pr.mean[k] << ',' << pr.variance[k] << '\n';
    outputs.push_back(dir / "predictions.csv");
    summary = {{"queries", q.size()}, {"n", data.size()}};
    std::cout << "predicted " << q.size() << " points from " << data.size()
              << " observations\n";
  } else {
    const Grid2D g = gp_grid(a);
    const Posterior post(init, data);
    const DisturbanceBound b = build_bound(post, g, a.p);
    const double z = interval_z(a.p, 1);
    std::ofstream f(dir / "bound.grid", std::ios::binary | std::ios::trunc);
    write_bound(f, b, g, a.p, z);
    outputs.push_back(dir / "bound.grid");
    summary = {{"p", a.p}, {"z", z}, {"max_magnitude", b.max_magnitude()}};
    std::cout << std::setprecision(10) << "p " << a.p << " z " << z << "\n";
  }
  std::cout << "output " << dir.string() << "\n";
  write_manifest(dir, "gp " + sub, config, static_cast<std::uint64_t>(a.seed), outputs,
                 seconds_since(t0), summary);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Safe learning toolkit: reachability, GP bounds, supervised flight"};
  app.require_subcommand(1);

  RunArgs ra;
  auto* run = app.add_subcommand("run", "Simulate a scenario file");
  run->add_option("scenario", ra.scenario, "Scenario config")->required();
  run->add_option("--mode", ra.mode, "none, boundary, local or global");
  run->add_option("--p", ra.p, "Bound probability mass");
  run->add_option("--lambda0", ra.lambda0, "Local confidence threshold");
  run->add_option("--gamma0", ra.gamma0, "Global confidence threshold");
  run->add_option("--seed", ra.seed, "Random seed");
  run->add_option("--grid", ra.grid, "Grid nodes NX,NY");
  run->add_option("--out", ra.out, "Output root (default $SAFELEARN_OUT or ./runs)");
  run->add_option("--set", ra.sets, "Override any config key, key=value");
  run->add_flag("--quiet", ra.quiet);

  ReachArgs rc;
  auto* reach = app.add_subcommand("reach", "Solve for a safe set and policy");
  reach->add_option("--k-thrust", rc.k_thrust);
  reach->add_option("--k-offset", rc.k_offset);
  reach->add_option("--u-min", rc.u_min);
  reach->add_option("--u-max", rc.u_max);
  reach->add_option("--bound", rc.bound, "Constant bound +-B");
  reach->add_option("--bound-range", rc.bound_range, "Constant bound LO,HI");
  reach->add_option("--bound-file", rc.bound_file, "Gridded bound from 'gp bound'");
  reach->add_option("--grid", rc.grid, "Grid nodes NX,NY");
  reach->add_option("--x1-range", rc.x1_range);
  reach->add_option("--x2-range", rc.x2_range);
  reach->add_option("--floor", rc.floor);
  reach->add_option("--ceiling", rc.ceiling);
  reach->add_option("--cfl", rc.cfl);
  reach->add_option("--tolerance", rc.tolerance);
  reach->add_option("--horizon", rc.horizon);
  reach->add_option("--scheme", rc.scheme, "weno5 or upwind1");
  reach->add_option("--out", rc.out, "Output directory");

  GpArgs ga;
  auto* gp = app.add_subcommand("gp", "Gaussian-process disturbance model");
  gp->require_subcommand(1);
  std::string gp_sub;
  for (const char* name : {"fit", "predict", "bound"}) {
    auto* c = gp->add_subcommand(name);
    c->add_option("--data", ga.data, "Dataset CSV t,x1,x2,u,f_hat,d_hat")->required();
    c->add_option("--theta", ga.theta_file, "theta JSON (e.g. from gp fit)");
    c->add_option("--sigma-f2", ga.theta.sigma_f2);
    c->add_option("--sigma-n2", ga.theta.sigma_n2);
    c->add_option("--lambda1", ga.theta.lambda1);
    c->add_option("--lambda2", ga.theta.lambda2);
    c->add_option("--out", ga.out, "Output directory");
    c->add_option("--seed", ga.seed);
    if (std::string(name) == "fit") c->add_option("--starts", ga.starts);
    if (std::string(name) != "fit") {
      c->add_option("--grid", ga.grid, "Grid nodes NX,NY");
      c->add_option("--x1-range", ga.x1_range);
      c->add_option("--x2-range", ga.x2_range);
    }
    if (std::string(name) == "predict") c->add_option("--query", ga.query, "CSV x1,x2");
    if (std::string(name) == "bound") c->add_option("--p", ga.p);
    c->callback([&gp_sub, name] { gp_sub = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitError;
  }
  try {
    if (*run) return cmd_run(ra, *run);
    if (*reach) return cmd_reach(rc);
    if (*gp) return cmd_gp(gp_sub, ga);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
