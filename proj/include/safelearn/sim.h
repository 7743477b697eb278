#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "safelearn/learner.h"
#include "safelearn/supervisor.h"

namespace safelearn {

enum class ReferenceKind { kSquare, kSinusoid, kConstant };

struct ReferenceSpec {
  ReferenceKind kind = ReferenceKind::kSquare;
  // square wave
  double high = 1.5;
  double low = 0.1;
  double half_period = 10.0;
  bool start_high = true;
  // sinusoid offset + amplitude sin(2 pi t / period); constant uses offset
  double offset = 1.4;
  double amplitude = 1.0;
  double period = 20.0;

  ReferencePoint at(double t) const;
  void validate() const;
};

/// 0 before t_on, then -amplitude * clamp(1 - x1 / height_scale, 0, 1).
double fan_field(const State& x, double t, double amplitude = 3.5,
                 double height_scale = 1.0, double t_on = 45.0);

struct FanSpec {
  bool enabled = false;
  double amplitude = 3.5;
  double height_scale = 1.0;
  double t_on = 45.0;
};

/// d(x, t) = constant + sin_amplitude sin(sin_frequency x1)
///         + velocity_gain x2 + fan(x, t)
struct DisturbanceSpec {
  double constant = 0.0;
  double sin_amplitude = 0.0;
  double sin_frequency = 2.0;
  double velocity_gain = 0.0;
  FanSpec fan;

  double at(const State& x, double t) const;
  /// Largest |d| over the altitude band and speeds up to `speed`.
  double magnitude_bound(double x1_min, double x1_max, double speed) const;
};

struct Scenario {
  std::string name = "scenario";
  double duration = 80.0;
  std::uint64_t seed = 1;
  double control_dt = 0.05;
  int substeps = 5;
  /// Control steps between a measurement and its derivative estimate.
  int observation_delay = 3;

  double k_thrust = 20.0;
  double k_offset = 0.0;
  double u_min = 0.0;
  double u_max = 1.0;

  double grid_x1_min = -0.5, grid_x1_max = 3.3;
  int grid_n1 = 161;
  double grid_x2_min = -3.0, grid_x2_max = 3.0;
  int grid_n2 = 161;
  SlabConstraint constraint;

  State initial;
  double noise_position = 0.002;
  double noise_velocity = 0.01;

  ReferenceSpec reference;
  DisturbanceSpec disturbance;

  /// Half-width of the constant bound that seeds version 0.
  double prior_half_width = 1.5;
  Hyperparams gp_shape;

  /// lookahead defaults to one control period and margin to a few
  /// position-noise deviations here.
  SupervisorConfig supervisor = [] {
    SupervisorConfig c;
    c.lookahead = 0.05;
    c.margin = 0.01;
    return c;
  }();
  LearnerConfig learner;
  PolicyWeights initial_weights{};

  AffineVerticalModel model() const;
  Grid2D grid() const;
  void validate() const;
};

class ScenarioParseError : public std::runtime_error {
 public:
  ScenarioParseError(const std::string& source, int line, const std::string& msg);
  int line() const { return line_; }

 private:
  int line_;
};

/// `key = value` lines; `#` starts a comment. Unknown keys and malformed
/// values are errors reported with the line number.
Scenario parse_scenario(std::istream& in, const std::string& source = "<input>");
Scenario load_scenario(const std::filesystem::path& path);

/// Sets one key as the config file would. Throws std::invalid_argument.
void set_scenario_key(Scenario& s, const std::string& key, const std::string& value);

/// Every key in canonical order with round-trip precision.
std::string scenario_to_config(const Scenario& s);

/// Time derivatives of uniformly sampled states: central differences
/// (second-order one-sided at the ends) smoothed by a centred moving average
/// of up to 5 taps that shrinks near the ends.
std::vector<StateRate> differentiate(const std::vector<State>& samples, double dt);

/// The control that, held piecewise over the sample intervals, produces the
/// same acceleration average as differentiate() reads at sample i. `u[j]` is
/// held on [t_j, t_j+1); needs u.size() >= n - 1.
double effective_input(const std::vector<double>& u, std::size_t n, std::size_t i);

struct LogRow {
  double t;
  State x;         // true state
  State measured;
  double u;
  ActionSource source;
  OverrideReason reason;
  double value;
  double lambda;
  double gamma;
  int version;
  double ref;
};

struct ViolationEvent {
  double t;
  State x;
};

struct VersionRecord {
  double installed_at;
  GuaranteesPtr guarantees;
};

struct ExperimentLog {
  std::string scenario;
  std::uint64_t seed = 0;
  std::vector<LogRow> rows;
  std::vector<ViolationEvent> violations;
  std::vector<VersionRecord> versions;
  std::vector<EpisodeRecord> episodes;
  std::vector<std::string> recompute_failures;
  /// Residual observations as ingested (t, x, u, f_hat, d_hat).
  std::vector<DatasetRow> observations;
  PolicyWeights final_weights{};
  double wall_seconds = 0.0;

  /// `t,x1,x2,u,source,V,lambda,gamma_lower,version,override_reason,ref`
  void write_csv(std::ostream& out) const;
  /// Mean |x1 - ref| over rows with t in [t0, t1).
  double mean_tracking_error(double t0, double t1) const;
  int overrides(double t0, double t1, OverrideReason reason) const;
  int overrides(double t0, double t1) const;
};

struct RunOptions {
  /// Reuse version 0 instead of solving it (must match the scenario).
  GuaranteesPtr prior;
  std::function<void(const LogRow&)> on_row;
};

/// Version 0 for the scenario: the constant prior bound and its safe set.
GuaranteesPtr scenario_prior(const Scenario& s);

ExperimentLog run_scenario(const Scenario& s, const RunOptions& opt = {});

/// `<root>/<name>_seed<seed>`
std::filesystem::path run_directory(const std::filesystem::path& root,
                                    const Scenario& s);

/// Writes log.csv, violations.csv, observations.csv, episodes.jsonl,
/// weights.json and versions/v<k>.grid into `dir`. Returns the written paths.
std::vector<std::filesystem::path> write_run_outputs(const ExperimentLog& log,
                                                     const std::filesystem::path& dir);

}  // namespace safelearn
