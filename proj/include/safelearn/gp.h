#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "safelearn/dynamics.h"
#include "safelearn/grid.h"

namespace safelearn {

/// Squared-exponential kernel hyperparameters. lambda1 and lambda2 are the
/// squared length scales in position and velocity.
struct Hyperparams {
  double sigma_f2 = 1.0;
  double sigma_n2 = 0.01;
  double lambda1 = 0.25;
  double lambda2 = 1.0;

  void validate() const;
  Eigen::Vector4d to_log() const;
  static Hyperparams from_log(const Eigen::Vector4d& log_params);
};

/// Disturbance measurements d_hat at states X.
struct Dataset {
  std::vector<State> inputs;
  std::vector<double> targets;

  std::size_t size() const { return inputs.size(); }
  bool empty() const { return inputs.empty(); }
  void add(const State& x, double d_hat);
  void append(const Dataset& other);
  void validate() const;
};

/// sigma_f^2 exp(-1/2 [(dx1)^2 / lambda1 + (dx2)^2 / lambda2]).
double kernel_eval(const Hyperparams& theta, const State& x, const State& y);

/// Residual between a measured acceleration and the known model,
/// f_hat.dx2 - (k_T u + g + k_0).
double measure_disturbance(const AffineVerticalModel& model, const State& x,
                           double u, const StateRate& f_hat);

/// Thrown when the kernel matrix is not positive definite after jitter.
class FactorizationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Multiply-add counts spent on factorization work.
struct OpCount {
  std::uint64_t factorization = 0;  // full Cholesky
  std::uint64_t extension = 0;      // triangular solves and Schur block
  std::uint64_t solves = 0;         // weight-vector refresh
};

struct Prediction {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

struct JointPrediction {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

/// Zero-mean GP posterior over the scalar disturbance. Holds the Cholesky
/// factor of K + (sigma_n^2 + jitter) I and the weight vector.
class Posterior {
 public:
  /// Relative diagonal jitter, scaled by sigma_f^2.
  static constexpr double kJitter = 1e-10;

  explicit Posterior(const Hyperparams& theta, Dataset data = {});

  const Hyperparams& hyperparams() const { return theta_; }
  const Dataset& data() const { return data_; }
  std::size_t size() const { return data_.size(); }
  const OpCount& ops() const { return ops_; }

  Prediction predict(std::span<const State> queries) const;
  double predict_mean(const State& x) const;
  /// Mean and standard deviation at one point.
  std::pair<double, double> predict_point(const State& x) const;
  JointPrediction predict_joint(std::span<const State> queries) const;

  double log_marginal_likelihood() const;

  /// Lower Cholesky factor of the noisy kernel matrix.
  Eigen::MatrixXd cholesky_factor() const;

  friend Posterior incremental_update(Posterior post, const Dataset& extra);

 private:
  Eigen::VectorXd cross_kernel(const State& x) const;
  void refresh_weights();
  auto factor() const {
    return storage_.topLeftCorner(size(), size())
        .triangularView<Eigen::Lower>();
  }

  Hyperparams theta_;
  Dataset data_;
  Eigen::VectorXd targets_;
  // Lower factor in the top-left size() x size() block; spare capacity keeps
  // appends from reallocating every time.
  Eigen::MatrixXd storage_;
  Eigen::VectorXd weights_;  // (K + sigma_n^2 I)^-1 d_hat
  OpCount ops_;
};

Prediction posterior_predict(const Posterior& post,
                             std::span<const State> queries);

/// Posterior on the concatenated data with theta fixed, extending the
/// existing factor through the Schur complement of the old block.
Posterior incremental_update(Posterior post, const Dataset& extra);

/// Log marginal likelihood of `data` under theta. Fills the gradient with
/// respect to the log hyperparameters when `grad` is non-null. Returns -inf
/// when the kernel matrix cannot be factorized.
double log_marginal_likelihood(const Dataset& data, const Hyperparams& theta,
                               Eigen::Vector4d* grad = nullptr);

struct FitOptions {
  int starts = 5;
  int max_iterations = 200;
  std::uint64_t seed = 7;
  /// Standard deviation of the start perturbations in log space.
  double start_spread = 1.0;
  /// Log-parameter box that keeps the search away from degenerate kernels.
  double log_min = -18.0;
  double log_max = 8.0;
};

struct FitResult {
  Hyperparams theta;
  double log_likelihood;
  double initial_log_likelihood;
  int evaluations = 0;
};

/// Multi-start BFGS ascent of the log marginal likelihood in log space.
/// Never returns a candidate worse than `init`.
FitResult fit_hyperparameters(const Dataset& data, const Hyperparams& init,
                              const FitOptions& options = {});

/// Gridded interval mean +- z sigma with z from interval_z(p, 1).
DisturbanceBound build_bound(const Posterior& post, const Grid2D& grid,
                             double p);

/// CSV with header t,x1,x2,u,f_hat,d_hat.
struct DatasetRow {
  double t, x1, x2, u, f_hat, d_hat;
};
std::vector<DatasetRow> read_dataset_csv(std::istream& in);
void write_dataset_csv(std::ostream& out, std::span<const DatasetRow> rows);
Dataset to_dataset(std::span<const DatasetRow> rows);

/// JSON snapshot of theta and the training set. Loading refactorizes.
std::string posterior_snapshot(const Posterior& post);
Posterior posterior_from_snapshot(const std::string& json_text);

}  // namespace safelearn
