#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "safelearn/dynamics.h"

namespace safelearn {

/// Reference altitude and vertical velocity.
struct ReferencePoint {
  double altitude = 0.0;
  double velocity = 0.0;
};

constexpr std::size_t kFeatureCount = 8;

/// Rectified PID features. Negative parts hold magnitudes.
enum Feature : std::size_t {
  kPosAbove,   // max(0, e)
  kPosBelow,   // max(0, -e)
  kVelAbove,   // max(0, ev)
  kVelBelow,   // max(0, -ev)
  kIntAbove,   // max(0, integral)
  kIntBelow,   // max(0, -integral)
  kBiasAbove,  // 1 if e > 0
  kBiasBelow,  // 1 if e <= 0
};

using FeatureVector = std::array<double, kFeatureCount>;
using PolicyWeights = std::array<double, kFeatureCount>;

/// e = x1 - ref.altitude, ev = x2 - ref.velocity.
FeatureVector features(const State& x, const ReferencePoint& ref,
                       double integral);

/// clamp(w . phi, u_min, u_max)
double policy_action(const PolicyWeights& w, const FeatureVector& phi,
                     double u_min = 0.0, double u_max = 1.0);

struct EpisodeSample {
  PolicyWeights perturbation;
  double episode_return;
};

/// Rejected perturbation batches (too few rows or no spread).
class DegeneratePerturbations : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Least-squares fit of returns on perturbations with an intercept; the
/// minimum-norm solution is used when the batch is underdetermined.
PolicyWeights estimate_gradient(const std::vector<EpisodeSample>& batch);

/// w + step * g, or w + step * g / |g| when `normalize` is set.
PolicyWeights policy_gradient_step(const PolicyWeights& w,
                                   const std::vector<EpisodeSample>& batch,
                                   double step, bool normalize = false);

/// Credit for one applied action: its features and the tracking signal
/// measured some time after it.
struct CreditSample {
  FeatureVector phi;
  double later_error;
};

/// -mean(phi * later_error): the ascent direction of the return when more
/// thrust is taken to raise the later error.
PolicyWeights signed_derivative_gradient(const std::vector<CreditSample>& samples);

enum class GradientEstimator { kFiniteDifference, kSignedDerivative };
const char* to_string(GradientEstimator e);
GradientEstimator gradient_estimator_from_string(const std::string& s);

struct LearnerConfig {
  bool learning = true;
  GradientEstimator estimator = GradientEstimator::kFiniteDifference;
  double delta = 0.05;
  double step = 0.1;
  bool normalize = false;
  /// Signed-derivative estimator only: an unsaturated action is credited with
  /// e + derivative_time * ev measured `horizon` seconds later, provided the
  /// learner kept control throughout.
  /// The weights step once per episode and no perturbations are run.
  double horizon = 0.5;
  double derivative_time = 0.5;
  double episode_length = 8.0;
  int batch = 8;
  double integral_clamp = 2.0;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Per-episode record for logging.
struct EpisodeRecord {
  int index;
  double start;
  double end;
  PolicyWeights weights;
  PolicyWeights perturbation;
  double episode_return;
  /// Control steps that counted toward the return.
  int learner_steps;
  double mean_abs_error;
};

/// Episodic policy gradient around a linear feature policy. With finite
/// differences each episode runs w + delta_k with antithetic sign vectors and
/// once `batch` usable episodes are collected the base weights take one step.
/// Only steps on which the learner's action was applied enter the return.
class PolicyGradientLearner {
 public:
  PolicyGradientLearner(LearnerConfig cfg, PolicyWeights initial,
                        double u_min = 0.0, double u_max = 1.0);

  /// Action for the measured state at time t. Advances the error integral.
  double act(double t, const State& measured, const ReferencePoint& ref,
             double dt);

  /// Report whether the last action was applied. Call once per act().
  void observe(bool applied);

  const PolicyWeights& weights() const { return weights_; }
  const PolicyWeights& active_weights() const { return active_; }
  const std::vector<EpisodeRecord>& episodes() const { return episodes_; }
  int updates() const { return updates_; }
  const LearnerConfig& config() const { return cfg_; }

 private:
  void start_episode(double t);
  void finish_episode(double t);
  PolicyWeights next_perturbation();
  void score(double e);
  void credit(const FeatureVector& phi, double s, double dt);

  struct PendingCredit {
    FeatureVector phi;
    bool usable;
  };

  LearnerConfig cfg_;
  PolicyWeights weights_;
  PolicyWeights active_{};
  PolicyWeights perturbation_{};
  double u_min_, u_max_;
  std::mt19937_64 rng_;
  double integral_ = 0.0;
  double episode_start_ = 0.0;
  bool started_ = false;
  double sq_error_ = 0.0;
  double abs_error_ = 0.0;
  int counted_ = 0;
  double last_error_ = 0.0;
  bool saturated_ = false;
  std::deque<PendingCredit> credit_;
  std::vector<CreditSample> credits_;
  std::vector<EpisodeSample> batch_;
  std::vector<EpisodeRecord> episodes_;
  PolicyWeights pending_flip_{};
  bool has_flip_ = false;
  int updates_ = 0;
};

/// JSON object keyed by feature name.
std::string weights_to_json(const PolicyWeights& w);
PolicyWeights weights_from_json(const std::string& text);
/// One JSON document per episode: index, times, weights, perturbation, return.
std::string episode_to_json(const EpisodeRecord& e);
const char* feature_name(std::size_t k);

}  // namespace safelearn
