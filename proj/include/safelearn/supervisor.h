#pragma once

#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "safelearn/confidence.h"
#include "safelearn/gp.h"
#include "safelearn/reach.h"

namespace safelearn {

enum class SupervisorMode { kNone, kBoundary, kLocal, kGlobal };
enum class ActionSource { kLearner, kSafety };
enum class OverrideReason { kNone, kBoundary, kLambda, kGamma, kOutOfGrid };

const char* to_string(SupervisorMode m);
const char* to_string(ActionSource s);
const char* to_string(OverrideReason r);
SupervisorMode supervisor_mode_from_string(const std::string& s);

struct SupervisorConfig {
  SupervisorMode mode = SupervisorMode::kBoundary;
  double p = 0.95;
  double lambda0 = 0.8;
  double gamma0 = 0.8;
  /// Seconds of data per recompute batch.
  double recompute_period = 10.0;
  /// Number of recomputes to run; 0 disables recomputation.
  int max_recomputes = 0;
  /// Sim-time delay between the data cutoff and the swap.
  double recompute_latency = 2.0;
  bool conservative = true;
  /// When positive, the learner also needs V > 0 at the states reached by
  /// holding its action this long under either end of the bound at x.
  /// Covers the gap between sampled control and the continuous-time set.
  double lookahead = 0.0;
  /// The learner keeps control only while V exceeds this at the measured
  /// state and at the lookahead states. Absorbs state-estimate error.
  double margin = 0.0;
  /// Evaluate the global bound every this many control steps.
  int gamma_stride = 5;
  LevelSetSampling sampling;
  MvnOptions mvn;
  FitOptions fit;
  SchemeParams scheme;

  void validate() const;
};

/// One versioned unit of safety guarantees. Never mutated after creation.
struct Guarantees {
  int version = 0;
  ValueGrid value;
  SafePolicyTable policy;
  DisturbanceBound bound;
  /// Posterior that generated the bound; its theta is shared by the live one.
  Posterior frozen;
  double p;
  double z;
  /// Time of the last observation included in `frozen`.
  double data_until;
};
using GuaranteesPtr = std::shared_ptr<const Guarantees>;

/// Thrown when a recompute cannot produce a converged solution.
class RecomputeFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Guarantees for a constant bound +-b, represented as the zero-data GP
/// prior with sigma_f = b / z so that confidence queries apply unchanged.
/// Only the length scales and noise of `shape` are used.
GuaranteesPtr prior_guarantees(const AffineVerticalModel& model,
                               const Grid2D& grid,
                               const SlabConstraint& constraint,
                               double half_width, const Hyperparams& shape,
                               double p, const SchemeParams& scheme = {});

/// Refit theta on `data` (starting from `init`), build the bound, solve, and
/// package everything as version `version`. Throws RecomputeFailed if the
/// solver does not converge.
GuaranteesPtr recompute_guarantees(int version, const Dataset& data,
                                   double data_until, const Hyperparams& init,
                                   const AffineVerticalModel& model,
                                   const Grid2D& grid,
                                   const SlabConstraint& constraint,
                                   const SupervisorConfig& cfg);

struct Decision {
  double u;
  ActionSource source;
  OverrideReason reason;
  int version;
  double value;   // V(x), NaN out of grid
  double lambda;  // NaN when not evaluated
  double gamma;   // NaN when not evaluated
};

/// Least-restrictive safety filter around a learning controller.
class Supervisor {
 public:
  Supervisor(SupervisorConfig cfg, AffineVerticalModel model,
             GuaranteesPtr initial);
  ~Supervisor();

  Decision select_action(const State& x, double learner_action);

  /// Residual from f_hat, appended to the buffer and the live posterior.
  void ingest_observation(double t, const State& x, double u,
                          const StateRate& f_hat);

  /// Launches due recomputes on a worker and installs finished ones once
  /// `t` reaches cutoff + latency. Returns true if a new version went live.
  bool tick(double t);

  /// Atomically replaces the active guarantees and resets the live
  /// posterior to the new frozen one.
  void install(GuaranteesPtr g);

  GuaranteesPtr snapshot() const;
  const Posterior& live() const { return live_; }
  const Dataset& buffer() const { return buffer_; }
  const std::vector<double>& buffer_times() const { return times_; }
  const SupervisorConfig& config() const { return cfg_; }
  int recomputes_started() const { return recomputes_started_; }
  /// Messages from failed recomputes.
  const std::vector<std::string>& failures() const { return failures_; }

 private:
  ConfidenceQuery query(const Guarantees& g, const State& x) const;

  SupervisorConfig cfg_;
  AffineVerticalModel model_;
  mutable std::mutex mutex_;
  GuaranteesPtr active_;
  Posterior live_;
  Dataset buffer_;
  std::vector<double> times_;
  long steps_ = 0;
  double cached_gamma_ = std::nan("");
  int cached_gamma_version_ = -1;

  struct Pending {
    double swap_time;
    std::future<GuaranteesPtr> result;
  };
  std::optional<Pending> pending_;
  int recomputes_started_ = 0;
  std::vector<std::string> failures_;
};

}  // namespace safelearn
