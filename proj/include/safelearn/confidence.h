#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "safelearn/gp.h"
#include "safelearn/reach.h"

namespace safelearn {

/// Inputs for a confidence evaluation at x. The bound intervals are
/// d_bar +- z sigma from the `frozen` (bound-generating) posterior; `live`
/// holds the same hyperparameters with all data seen since.
struct ConfidenceQuery {
  State x;
  const Posterior* frozen = nullptr;
  const Posterior* live = nullptr;
  double p = 0.95;
  double z = 1.959963984540054;
  /// Hold the predictive spread at its bound-generation value so only the
  /// mean reacts to new data.
  bool conservative = true;

  void validate() const;
};

/// Probability under the live predictive that d(x) lies in the frozen
/// interval at x.
double local_confidence(const ConfidenceQuery& q);

/// Rejects non-PSD covariances and oversized problems.
class MvnError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct MvnOptions {
  static constexpr int kMaxDimension = 25;
  /// Target standard error.
  double accuracy = 1e-3;
  std::uint64_t seed = 1;
  /// Independent random shifts of the lattice; the spread of their estimates
  /// gives the standard error.
  int shifts = 10;
  /// Cap on integrand evaluations per shift.
  long max_points = 1L << 17;
};

struct MvnResult {
  double probability;
  double std_error;
  long evaluations;
};

/// P(lower <= Z <= upper) for Z ~ N(mean, cov) by sequential conditioning
/// on a randomly shifted rank-1 lattice. Bounds may be infinite.
MvnResult mvn_rectangle_prob(const Eigen::VectorXd& mean,
                             const Eigen::MatrixXd& cov,
                             const Eigen::VectorXd& lower,
                             const Eigen::VectorXd& upper,
                             const MvnOptions& options = {});

struct LevelSetSampling {
  int levels = 5;  // S
  int points = 20; // I per level

  void validate() const;
};

struct GlobalConfidence {
  double gamma_lower = 0.0;
  /// Joint probability per level alpha_s = s V(x) / S, s = 1..S; NaN where
  /// the level set was empty.
  std::vector<double> level_probability;
  std::vector<double> level_std_error;
};

/// Lower bound on the probability that some level set between 0 and V(x) is
/// entirely covered by the frozen bound, as the maximum over sampled levels
/// of the joint probability at I points. The top level includes x itself.
GlobalConfidence global_confidence_lower(const ValueGrid& v,
                                         const ConfidenceQuery& q,
                                         const LevelSetSampling& sampling,
                                         const MvnOptions& options = {});

/// Joint probability that d lies inside the frozen intervals at `points`.
MvnResult joint_coverage(const ConfidenceQuery& q,
                         const std::vector<State>& points,
                         const MvnOptions& options = {});

/// Throws std::invalid_argument unless 0 < threshold < p.
void validate_threshold(double threshold, double p);

/// True iff value > threshold (guarantees trusted).
bool confidence_threshold_check(double value, double threshold, double p);

}  // namespace safelearn
