#include "safelearn/gp.h"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "safelearn/special_functions.h"

namespace safelearn {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool positive_finite(double v) { return std::isfinite(v) && v > 0.0; }

double noise_diagonal(const Hyperparams& th) {
  return th.sigma_n2 + Posterior::kJitter * th.sigma_f2;
}

Eigen::MatrixXd kernel_matrix(const Hyperparams& th,
                              const std::vector<State>& a,
                              const std::vector<State>& b) {
  Eigen::MatrixXd k(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      k(i, j) = kernel_eval(th, a[i], b[j]);
  return k;
}

std::uint64_t cube_third(std::uint64_t n) { return n * n * n / 3; }

}  // namespace

void Hyperparams::validate() const {
  if (!positive_finite(sigma_f2) || !positive_finite(sigma_n2) ||
      !positive_finite(lambda1) || !positive_finite(lambda2))
    throw std::invalid_argument("hyperparameters must be positive and finite");
}

Eigen::Vector4d Hyperparams::to_log() const {
  return {std::log(sigma_f2), std::log(sigma_n2), std::log(lambda1),
          std::log(lambda2)};
}

Hyperparams Hyperparams::from_log(const Eigen::Vector4d& lp) {
  return {std::exp(lp[0]), std::exp(lp[1]), std::exp(lp[2]), std::exp(lp[3])};
}

void Dataset::add(const State& x, double d_hat) {
  inputs.push_back(x);
  targets.push_back(d_hat);
}

void Dataset::append(const Dataset& other) {
  inputs.insert(inputs.end(), other.inputs.begin(), other.inputs.end());
  targets.insert(targets.end(), other.targets.begin(), other.targets.end());
}

void Dataset::validate() const {
  if (inputs.size() != targets.size())
    throw std::invalid_argument("dataset inputs and targets differ in length");
  for (std::size_t i = 0; i < inputs.size(); ++i)
    if (!inputs[i].finite() || !std::isfinite(targets[i]))
      throw std::invalid_argument("dataset entry " + std::to_string(i) +
                                  " is not finite");
}

double kernel_eval(const Hyperparams& th, const State& x, const State& y) {
  const double d1 = x.x1 - y.x1;
  const double d2 = x.x2 - y.x2;
  return th.sigma_f2 *
         std::exp(-0.5 * (d1 * d1 / th.lambda1 + d2 * d2 / th.lambda2));
}

double measure_disturbance(const AffineVerticalModel& model, const State&,
                           double u, const StateRate& f_hat) {
  if (!model.control_admissible(u))
    throw std::invalid_argument("control outside the admissible interval");
  return f_hat.dx2 - model.nominal_acceleration(u);
}

Posterior::Posterior(const Hyperparams& theta, Dataset data)
    : theta_(theta), data_(std::move(data)) {
  theta_.validate();
  data_.validate();
  const std::size_t n = data_.size();
  targets_ = Eigen::Map<const Eigen::VectorXd>(data_.targets.data(), n);
  storage_.resize(n, n);
  if (n > 0) {
    Eigen::MatrixXd k = kernel_matrix(theta_, data_.inputs, data_.inputs);
    k.diagonal().array() += noise_diagonal(theta_);
    Eigen::LLT<Eigen::MatrixXd> llt(k);
    if (llt.info() != Eigen::Success)
      throw FactorizationError("kernel matrix not positive definite");
    storage_ = llt.matrixL();
    ops_.factorization += cube_third(n);
  }
  refresh_weights();
}

void Posterior::refresh_weights() {
  const std::size_t n = size();
  weights_ = targets_;
  if (n == 0) return;
  factor().solveInPlace(weights_);
  storage_.topLeftCorner(n, n)
      .transpose()
      .triangularView<Eigen::Upper>()
      .solveInPlace(weights_);
  ops_.solves += static_cast<std::uint64_t>(n) * n;
}

Eigen::VectorXd Posterior::cross_kernel(const State& x) const {
  Eigen::VectorXd k(size());
  for (std::size_t i = 0; i < size(); ++i)
    k[i] = kernel_eval(theta_, data_.inputs[i], x);
  return k;
}

Eigen::MatrixXd Posterior::cholesky_factor() const {
  Eigen::MatrixXd l = factor();
  return l;
}

Prediction Posterior::predict(std::span<const State> queries) const {
  const std::size_t q = queries.size();
  Prediction out;
  out.mean.resize(q);
  out.variance.resize(q);
  const double floor = 1e-12 * theta_.sigma_f2;
  if (size() == 0) {
    out.mean.setZero();
    out.variance.setConstant(theta_.sigma_f2);
    return out;
  }
  Eigen::MatrixXd kx(size(), q);
  for (std::size_t c = 0; c < q; ++c) kx.col(c) = cross_kernel(queries[c]);
  out.mean = kx.transpose() * weights_;
  factor().solveInPlace(kx);
  out.variance = (theta_.sigma_f2 - kx.colwise().squaredNorm().array())
                     .max(floor)
                     .matrix()
                     .transpose();
  return out;
}

double Posterior::predict_mean(const State& x) const {
  if (size() == 0) return 0.0;
  return cross_kernel(x).dot(weights_);
}

std::pair<double, double> Posterior::predict_point(const State& x) const {
  const State q[1] = {x};
  const Prediction p = predict(q);
  return {p.mean[0], std::sqrt(p.variance[0])};
}

JointPrediction Posterior::predict_joint(std::span<const State> queries) const {
  const std::size_t q = queries.size();
  std::vector<State> qs(queries.begin(), queries.end());
  JointPrediction out;
  out.covariance = kernel_matrix(theta_, qs, qs);
  if (size() == 0) {
    out.mean = Eigen::VectorXd::Zero(q);
    return out;
  }
  Eigen::MatrixXd kx = kernel_matrix(theta_, data_.inputs, qs);
  out.mean = kx.transpose() * weights_;
  factor().solveInPlace(kx);
  out.covariance.noalias() -= kx.transpose() * kx;
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose());
  return out;
}

double Posterior::log_marginal_likelihood() const {
  const std::size_t n = size();
  if (n == 0) return 0.0;
  double logdet = 0.0;
  for (std::size_t i = 0; i < n; ++i) logdet += std::log(storage_(i, i));
  return -0.5 * targets_.dot(weights_) - logdet -
         0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
}

Prediction posterior_predict(const Posterior& post,
                             std::span<const State> queries) {
  return post.predict(queries);
}

Posterior incremental_update(Posterior post, const Dataset& extra) {
  extra.validate();
  const std::size_t m = extra.size();
  if (m == 0) return post;
  const std::size_t n = post.size();
  const std::size_t total = n + m;

  if (static_cast<std::size_t>(post.storage_.rows()) < total) {
    const std::size_t cap = std::max(total, 2 * n);
    Eigen::MatrixXd grown(cap, cap);
    grown.topLeftCorner(n, n) = post.storage_.topLeftCorner(n, n);
    post.storage_.swap(grown);
  }

  const Hyperparams& th = post.theta_;
  Eigen::MatrixXd k22 = kernel_matrix(th, extra.inputs, extra.inputs);
  k22.diagonal().array() += noise_diagonal(th);
  if (n > 0) {
    // L21^T = L11^-1 K12, then the Schur complement K22 - L21 L21^T.
    Eigen::MatrixXd l21t = kernel_matrix(th, post.data_.inputs, extra.inputs);
    post.factor().solveInPlace(l21t);
    k22.noalias() -= l21t.transpose() * l21t;
    post.storage_.block(n, 0, m, n) = l21t.transpose();
    post.ops_.extension += static_cast<std::uint64_t>(n) * n * m +
                           static_cast<std::uint64_t>(m) * m * n;
  }
  Eigen::LLT<Eigen::MatrixXd> llt(k22);
  if (llt.info() != Eigen::Success)
    throw FactorizationError("Schur complement not positive definite");
  post.storage_.block(n, n, m, m) = llt.matrixL();
  post.ops_.extension += cube_third(m);

  post.data_.append(extra);
  post.targets_ =
      Eigen::Map<const Eigen::VectorXd>(post.data_.targets.data(), total);
  post.refresh_weights();
  return post;
}

double log_marginal_likelihood(const Dataset& data, const Hyperparams& th,
                               Eigen::Vector4d* grad) {
  data.validate();
  const std::size_t n = data.size();
  const Eigen::MatrixXd kf = kernel_matrix(th, data.inputs, data.inputs);
  Eigen::MatrixXd k = kf;
  k.diagonal().array() += noise_diagonal(th);
  Eigen::LLT<Eigen::MatrixXd> llt(k);
  if (llt.info() != Eigen::Success) return kNegInf;
  const Eigen::VectorXd y =
      Eigen::Map<const Eigen::VectorXd>(data.targets.data(), n);
  const Eigen::VectorXd alpha = llt.solve(y);
  const Eigen::MatrixXd l = llt.matrixL();
  const double logdet = l.diagonal().array().log().sum();
  const double value = -0.5 * y.dot(alpha) - logdet -
                       0.5 * static_cast<double>(n) *
                           std::log(2.0 * std::numbers::pi);
  if (!std::isfinite(value)) return kNegInf;

  if (grad) {
    // d/dtheta_i = 1/2 tr((alpha alpha^T - K^-1) dK/dtheta_i)
    Eigen::MatrixXd w = llt.solve(Eigen::MatrixXd::Identity(n, n));
    w = alpha * alpha.transpose() - w;
    Eigen::MatrixXd d1(n, n), d2(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double a = data.inputs[i].x1 - data.inputs[j].x1;
        const double b = data.inputs[i].x2 - data.inputs[j].x2;
        d1(i, j) = kf(i, j) * a * a / (2.0 * th.lambda1);
        d2(i, j) = kf(i, j) * b * b / (2.0 * th.lambda2);
      }
    const double tr = w.trace();
    (*grad)[0] =
        0.5 * (w.cwiseProduct(kf).sum() + Posterior::kJitter * th.sigma_f2 * tr);
    (*grad)[1] = 0.5 * th.sigma_n2 * tr;
    (*grad)[2] = 0.5 * w.cwiseProduct(d1).sum();
    (*grad)[3] = 0.5 * w.cwiseProduct(d2).sum();
  }
  return value;
}

namespace {

struct Objective {
  const Dataset& data;
  const FitOptions& opt;
  int evaluations = 0;

  bool inside(const Eigen::Vector4d& lp) const {
    return (lp.array() >= opt.log_min).all() && (lp.array() <= opt.log_max).all();
  }

  double operator()(const Eigen::Vector4d& lp, Eigen::Vector4d* g) {
    ++evaluations;
    if (!inside(lp)) return kNegInf;
    const double v = log_marginal_likelihood(data, Hyperparams::from_log(lp), g);
    if (g && !g->allFinite()) return kNegInf;
    return v;
  }
};

// BFGS ascent with Armijo backtracking. Returns the final point and value.
std::pair<Eigen::Vector4d, double> bfgs_ascent(Objective& f,
                                               Eigen::Vector4d x,
                                               int max_iter) {
  Eigen::Vector4d g;
  double fx = f(x, &g);
  if (!std::isfinite(fx)) return {x, fx};
  Eigen::Matrix4d h = Eigen::Matrix4d::Identity();
  constexpr double kMaxStep = 2.0;

  for (int it = 0; it < max_iter; ++it) {
    if (g.lpNorm<Eigen::Infinity>() < 1e-7) break;
    Eigen::Vector4d dir = h * g;
    if (dir.dot(g) <= 0.0) {
      h.setIdentity();
      dir = g;
    }
    const double len = dir.norm();
    if (len > kMaxStep) dir *= kMaxStep / len;

    double step = 1.0;
    Eigen::Vector4d xn, gn;
    double fn = kNegInf;
    bool accepted = false;
    for (int k = 0; k < 50; ++k) {
      xn = x + step * dir;
      fn = f(xn, &gn);
      if (std::isfinite(fn) && fn >= fx + 1e-4 * step * g.dot(dir)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;

    const Eigen::Vector4d s = xn - x;
    // Ascent on f is descent on -f, whose gradient change is -(gn - g).
    const Eigen::Vector4d y = g - gn;
    const double sy = s.dot(y);
    if (sy > 1e-12) {
      const double rho = 1.0 / sy;
      const Eigen::Matrix4d id = Eigen::Matrix4d::Identity();
      h = (id - rho * s * y.transpose()) * h * (id - rho * y * s.transpose()) +
          rho * s * s.transpose();
    }
    const double gain = fn - fx;
    x = xn;
    fx = fn;
    g = gn;
    if (gain < 1e-12 * (1.0 + std::abs(fx))) break;
  }
  return {x, fx};
}

}  // namespace

FitResult fit_hyperparameters(const Dataset& data, const Hyperparams& init,
                              const FitOptions& options) {
  data.validate();
  init.validate();
  if (data.size() < 5)
    throw std::invalid_argument("hyperparameter fit needs at least 5 points");
  if (options.starts < 1 || options.max_iterations < 1)
    throw std::invalid_argument("fit needs at least one start and iteration");

  Objective f{data, options};
  const Eigen::Vector4d x0 = init.to_log();
  const double f0 = log_marginal_likelihood(data, init);

  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal(0.0, options.start_spread);

  Eigen::Vector4d best_x = x0;
  double best_f = f0;
  for (int s = 0; s < options.starts; ++s) {
    Eigen::Vector4d start = x0;
    if (s > 0)
      for (int k = 0; k < 4; ++k) start[k] += normal(rng);
    start = start.cwiseMax(options.log_min).cwiseMin(options.log_max);
    auto [x, fx] = bfgs_ascent(f, start, options.max_iterations);
    if (std::isfinite(fx) && (!std::isfinite(best_f) || fx > best_f)) {
      best_f = fx;
      best_x = x;
    }
  }
  if (!std::isfinite(best_f))
    throw std::runtime_error("no start produced a finite log-likelihood");
  return {Hyperparams::from_log(best_x), best_f, f0, f.evaluations};
}

DisturbanceBound build_bound(const Posterior& post, const Grid2D& grid,
                             double p) {
  const double z = interval_z(p, 1);
  std::vector<double> lower(grid.size()), upper(grid.size());
  constexpr std::size_t kChunk = 2048;
  std::vector<State> batch;
  batch.reserve(kChunk);
  std::size_t start = 0;
  auto flush = [&] {
    const Prediction pr = post.predict(batch);
    for (std::size_t k = 0; k < batch.size(); ++k) {
      const double half = z * std::sqrt(pr.variance[k]);
      lower[start + k] = pr.mean[k] - half;
      upper[start + k] = pr.mean[k] + half;
    }
    start += batch.size();
    batch.clear();
  };
  for (int i = 0; i < grid.n1(); ++i)
    for (int j = 0; j < grid.n2(); ++j) {
      batch.push_back(grid.node(i, j));
      if (batch.size() == kChunk) flush();
    }
  if (!batch.empty()) flush();
  return DisturbanceBound::gridded(grid, std::move(lower), std::move(upper));
}

std::vector<DatasetRow> read_dataset_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("dataset csv is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "t,x1,x2,u,f_hat,d_hat")
    throw std::runtime_error("dataset csv: unexpected header '" + line + "'");
  std::vector<DatasetRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    double v[6];
    int c = 0;
    while (std::getline(ss, cell, ',')) {
      if (c >= 6) break;
      try {
        std::size_t used = 0;
        v[c] = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw std::runtime_error("dataset csv line " + std::to_string(lineno) +
                                 ": bad number '" + cell + "'");
      }
      ++c;
    }
    if (c != 6 || std::getline(ss, cell, ','))
      throw std::runtime_error("dataset csv line " + std::to_string(lineno) +
                               ": expected 6 columns");
    rows.push_back({v[0], v[1], v[2], v[3], v[4], v[5]});
  }
  return rows;
}

void write_dataset_csv(std::ostream& out, std::span<const DatasetRow> rows) {
  out << "t,x1,x2,u,f_hat,d_hat\n";
  const auto old = out.precision(17);
  for (const auto& r : rows)
    out << r.t << ',' << r.x1 << ',' << r.x2 << ',' << r.u << ',' << r.f_hat
        << ',' << r.d_hat << '\n';
  out.precision(old);
}

Dataset to_dataset(std::span<const DatasetRow> rows) {
  Dataset d;
  for (const auto& r : rows) d.add({r.x1, r.x2}, r.d_hat);
  d.validate();
  return d;
}

std::string posterior_snapshot(const Posterior& post) {
  const Hyperparams& th = post.hyperparams();
  nlohmann::json j;
  j["hyperparams"] = {{"sigma_f2", th.sigma_f2},
                      {"sigma_n2", th.sigma_n2},
                      {"lambda1", th.lambda1},
                      {"lambda2", th.lambda2}};
  nlohmann::json x = nlohmann::json::array();
  for (const auto& s : post.data().inputs) x.push_back({s.x1, s.x2});
  j["inputs"] = std::move(x);
  j["targets"] = post.data().targets;
  return j.dump();
}

Posterior posterior_from_snapshot(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  const auto& h = j.at("hyperparams");
  Hyperparams th{h.at("sigma_f2").get<double>(), h.at("sigma_n2").get<double>(),
                 h.at("lambda1").get<double>(), h.at("lambda2").get<double>()};
  Dataset d;
  d.targets = j.at("targets").get<std::vector<double>>();
  for (const auto& p : j.at("inputs"))
    d.inputs.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  return Posterior(th, std::move(d));
}

}  // namespace safelearn
