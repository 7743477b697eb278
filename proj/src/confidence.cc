#include "safelearn/confidence.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "safelearn/special_functions.h"

namespace safelearn {

namespace {

// Phi(b) - Phi(a) evaluated on whichever tail keeps precision.
double interval_mass(double a, double b) {
  if (!(b > a)) return 0.0;
  double m = a > 0.0 ? normal_cdf(-a) - normal_cdf(-b)
                     : normal_cdf(b) - normal_cdf(a);
  return std::clamp(m, 0.0, 1.0);
}

constexpr int kPrimes[] = {2,  3,  5,  7,  11, 13, 17, 19, 23, 29, 31, 37,
                           41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89};

// Sequential-conditioning integrand over the unit cube.
class GenzIntegrand {
 public:
  GenzIntegrand(Eigen::MatrixXd chol, Eigen::VectorXd a, Eigen::VectorXd b)
      : l_(std::move(chol)), a_(std::move(a)), b_(std::move(b)),
        y_(l_.rows()) {}

  double operator()(const double* w) {
    const Eigen::Index n = l_.rows();
    double f = 1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < i; ++k) s += l_(i, k) * y_[k];
      const double c = l_(i, i);
      if (c > 0.0) {
        const double lo_arg = (a_[i] - s) / c, hi_arg = (b_[i] - s) / c;
        const double width = interval_mass(lo_arg, hi_arg);
        if (width <= 0.0) return 0.0;
        f *= width;
        if (i + 1 < n) {
          const double lo = normal_cdf(lo_arg);
          const double u = std::clamp(lo + w[i] * width, 1e-17, 1.0 - 1e-16);
          y_[i] = normal_quantile(u);
        }
      } else {
        if (s < a_[i] || s > b_[i]) return 0.0;
        y_[i] = 0.0;
      }
    }
    return f;
  }

 private:
  Eigen::MatrixXd l_;
  Eigen::VectorXd a_, b_;
  Eigen::VectorXd y_;
};

// Cholesky factor allowing zero pivots (semidefinite input).
Eigen::MatrixXd semidefinite_cholesky(const Eigen::MatrixXd& cov) {
  const Eigen::Index n = cov.rows();
  const double scale = std::max(cov.diagonal().cwiseAbs().maxCoeff(), 1e-300);
  const double tol = 1e-12 * scale;
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double d = cov(j, j) - l.row(j).head(j).squaredNorm();
    if (d < -1e3 * tol) throw MvnError("covariance is not positive semidefinite");
    if (d <= tol) continue;
    l(j, j) = std::sqrt(d);
    for (Eigen::Index i = j + 1; i < n; ++i)
      l(i, j) = (cov(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / l(j, j);
  }
  return l;
}

}  // namespace

void ConfidenceQuery::validate() const {
  if (!frozen || !live)
    throw std::invalid_argument("confidence query needs frozen and live posteriors");
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("p must lie in (0, 1)");
  if (!(z > 0.0)) throw std::invalid_argument("z must be positive");
  const Hyperparams& a = frozen->hyperparams();
  const Hyperparams& b = live->hyperparams();
  if (a.sigma_f2 != b.sigma_f2 || a.sigma_n2 != b.sigma_n2 ||
      a.lambda1 != b.lambda1 || a.lambda2 != b.lambda2)
    throw std::invalid_argument("frozen and live posteriors differ in theta");
}

double local_confidence(const ConfidenceQuery& q) {
  q.validate();
  const auto [d_bar, sigma] = q.frozen->predict_point(q.x);
  const double d_plus = d_bar + q.z * sigma;
  const double d_minus = d_bar - q.z * sigma;
  double m, s;
  if (q.conservative) {
    m = q.live->predict_mean(q.x);
    s = sigma;
  } else {
    std::tie(m, s) = q.live->predict_point(q.x);
  }
  return interval_mass((d_minus - m) / s, (d_plus - m) / s);
}

MvnResult mvn_rectangle_prob(const Eigen::VectorXd& mean,
                             const Eigen::MatrixXd& cov,
                             const Eigen::VectorXd& lower,
                             const Eigen::VectorXd& upper,
                             const MvnOptions& opt) {
  const Eigen::Index n = mean.size();
  if (cov.rows() != n || cov.cols() != n || lower.size() != n ||
      upper.size() != n)
    throw std::invalid_argument("mvn_rectangle_prob: size mismatch");
  if (n > MvnOptions::kMaxDimension)
    throw MvnError("mvn_rectangle_prob: dimension " + std::to_string(n) +
                   " exceeds " + std::to_string(MvnOptions::kMaxDimension));
  if (!(opt.accuracy > 0.0) || opt.shifts < 2 || opt.max_points < 1)
    throw std::invalid_argument("mvn_rectangle_prob: bad options");
  if (n == 0) return {1.0, 0.0, 0};
  if (!cov.allFinite() || !mean.allFinite())
    throw MvnError("mvn_rectangle_prob: non-finite input");
  const double scale = cov.diagonal().cwiseAbs().maxCoeff();
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-10 * std::max(scale, 1e-300))
    throw MvnError("mvn_rectangle_prob: covariance is not symmetric");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (cov(i, i) < 0.0) throw MvnError("covariance is not positive semidefinite");
    if (lower[i] > upper[i]) return {0.0, 0.0, 0};
  }

  Eigen::VectorXd a = lower - mean, b = upper - mean;

  // Most constrained variables first keeps the conditional widths small
  // early, which lowers the integrand variance.
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> mass(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double sd = std::sqrt(cov(i, i));
    mass[i] = sd > 0.0 ? interval_mass(a[i] / sd, b[i] / sd)
                       : (a[i] <= 0.0 && b[i] >= 0.0 ? 1.0 : 0.0);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](auto i, auto j) { return mass[i] < mass[j]; });
  Eigen::MatrixXd c(n, n);
  Eigen::VectorXd pa(n), pb(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    pa[i] = a[order[i]];
    pb[i] = b[order[i]];
    for (Eigen::Index j = 0; j < n; ++j) c(i, j) = cov(order[i], order[j]);
  }
  GenzIntegrand integrand(semidefinite_cholesky(c), pa, pb);

  const Eigen::Index dim = n - 1;
  if (dim == 0) return {integrand(nullptr), 0.0, 1};

  std::vector<double> gen(dim);
  for (Eigen::Index k = 0; k < dim; ++k) {
    const double r = std::sqrt(static_cast<double>(kPrimes[k]));
    gen[k] = r - std::floor(r);
  }
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::vector<double>> shift(opt.shifts, std::vector<double>(dim));
  for (auto& s : shift)
    for (auto& v : s) v = unif(rng);

  std::vector<double> sums(opt.shifts, 0.0);
  std::vector<double> w(dim);
  long done = 0;
  long target = 128;
  double estimate = 0.0, se = 0.0;
  while (true) {
    for (int m = 0; m < opt.shifts; ++m) {
      for (long j = done + 1; j <= target; ++j) {
        for (Eigen::Index k = 0; k < dim; ++k) {
          double x = j * gen[k] + shift[m][k];
          x -= std::floor(x);
          w[k] = 1.0 - std::abs(2.0 * x - 1.0);  // baker's transform
        }
        sums[m] += integrand(w.data());
      }
    }
    done = target;
    double mean_est = 0.0;
    for (double s : sums) mean_est += s / done;
    mean_est /= opt.shifts;
    double var = 0.0;
    for (double s : sums) var += (s / done - mean_est) * (s / done - mean_est);
    var /= (opt.shifts - 1);
    estimate = mean_est;
    se = std::sqrt(var / opt.shifts);
    if (se <= opt.accuracy || target >= opt.max_points) break;
    target = std::min(2 * target, opt.max_points);
  }
  return {std::clamp(estimate, 0.0, 1.0), se, done * opt.shifts};
}

void LevelSetSampling::validate() const {
  if (levels < 1 || points < 1)
    throw std::invalid_argument("level-set sampling needs S >= 1 and I >= 1");
  if (points > MvnOptions::kMaxDimension)
    throw std::invalid_argument("points per level set exceed the MVN cap");
}

MvnResult joint_coverage(const ConfidenceQuery& q,
                         const std::vector<State>& points,
                         const MvnOptions& options) {
  q.validate();
  const JointPrediction frozen = q.frozen->predict_joint(points);
  const Eigen::VectorXd half =
      q.z * frozen.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  const Eigen::VectorXd lower = frozen.mean - half;
  const Eigen::VectorXd upper = frozen.mean + half;
  if (q.conservative) {
    Eigen::VectorXd m(points.size());
    for (std::size_t k = 0; k < points.size(); ++k)
      m[k] = q.live->predict_mean(points[k]);
    return mvn_rectangle_prob(m, frozen.covariance, lower, upper, options);
  }
  const JointPrediction live = q.live->predict_joint(points);
  return mvn_rectangle_prob(live.mean, live.covariance, lower, upper, options);
}

GlobalConfidence global_confidence_lower(const ValueGrid& v,
                                         const ConfidenceQuery& q,
                                         const LevelSetSampling& sampling,
                                         const MvnOptions& options) {
  sampling.validate();
  q.validate();
  GlobalConfidence out;
  const double vx = value_at(v, q.x);
  if (vx < 0.0) return out;
  const int levels = sampling.levels;
  for (int s = 1; s <= levels; ++s) {
    const double alpha = vx * s / levels;
    std::vector<State> pts;
    if (s == levels) {
      pts.push_back(q.x);
      if (sampling.points > 1) {
        auto more = level_set_points(v, alpha, sampling.points - 1);
        pts.insert(pts.end(), more.begin(), more.end());
      }
    } else {
      pts = level_set_points(v, alpha, sampling.points);
    }
    if (pts.empty()) {
      out.level_probability.push_back(std::nan(""));
      out.level_std_error.push_back(std::nan(""));
      continue;
    }
    MvnOptions opt = options;
    opt.seed = options.seed + static_cast<std::uint64_t>(s);
    const MvnResult r = joint_coverage(q, pts, opt);
    out.level_probability.push_back(r.probability);
    out.level_std_error.push_back(r.std_error);
    out.gamma_lower = std::max(out.gamma_lower, r.probability);
  }
  return out;
}

void validate_threshold(double threshold, double p) {
  if (!(threshold > 0.0 && threshold < p))
    throw std::invalid_argument("confidence threshold " +
                                std::to_string(threshold) +
                                " must lie in (0, p) with p = " +
                                std::to_string(p));
}

bool confidence_threshold_check(double value, double threshold, double p) {
  validate_threshold(threshold, p);
  return value > threshold;
}

}  // namespace safelearn
