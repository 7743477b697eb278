#include "safelearn/learner.h"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>
#include <json.hpp>

namespace safelearn {

namespace {

constexpr const char* kNames[kFeatureCount] = {
    "pos_above", "pos_below", "vel_above",  "vel_below",
    "int_above", "int_below", "bias_above", "bias_below"};

nlohmann::json array_json(const PolicyWeights& w) {
  nlohmann::json j;
  for (std::size_t k = 0; k < kFeatureCount; ++k) j[kNames[k]] = w[k];
  return j;
}

PolicyWeights ascend(const PolicyWeights& w, const PolicyWeights& g, double step,
                     bool normalize) {
  double scale = step;
  if (normalize) {
    double norm = 0.0;
    for (double v : g) norm += v * v;
    norm = std::sqrt(norm);
    scale = norm > 0.0 ? step / norm : 0.0;
  }
  PolicyWeights out = w;
  for (std::size_t k = 0; k < kFeatureCount; ++k) out[k] += scale * g[k];
  return out;
}

}  // namespace

const char* feature_name(std::size_t k) {
  if (k >= kFeatureCount) throw std::out_of_range("feature index");
  return kNames[k];
}

FeatureVector features(const State& x, const ReferencePoint& ref,
                       double integral) {
  const double e = x.x1 - ref.altitude;
  const double ev = x.x2 - ref.velocity;
  FeatureVector phi{};
  phi[kPosAbove] = std::max(0.0, e);
  phi[kPosBelow] = std::max(0.0, -e);
  phi[kVelAbove] = std::max(0.0, ev);
  phi[kVelBelow] = std::max(0.0, -ev);
  phi[kIntAbove] = std::max(0.0, integral);
  phi[kIntBelow] = std::max(0.0, -integral);
  phi[kBiasAbove] = e > 0.0 ? 1.0 : 0.0;
  phi[kBiasBelow] = e > 0.0 ? 0.0 : 1.0;
  return phi;
}

double policy_action(const PolicyWeights& w, const FeatureVector& phi,
                     double u_min, double u_max) {
  double s = 0.0;
  for (std::size_t k = 0; k < kFeatureCount; ++k) s += w[k] * phi[k];
  if (std::isnan(s)) return u_min;
  return std::clamp(s, u_min, u_max);
}

PolicyWeights estimate_gradient(const std::vector<EpisodeSample>& batch) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  if (n < 2) throw DegeneratePerturbations("need at least 2 perturbed episodes");
  Eigen::MatrixXd d(n, kFeatureCount);
  Eigen::VectorXd r(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!std::isfinite(batch[i].episode_return))
      throw std::invalid_argument("episode return is not finite");
    for (std::size_t k = 0; k < kFeatureCount; ++k)
      d(i, k) = batch[i].perturbation[k];
    r[i] = batch[i].episode_return;
  }
  if (!d.allFinite()) throw DegeneratePerturbations("non-finite perturbation");
  const double scale = d.cwiseAbs().maxCoeff();
  // Centering is the intercept.
  d.rowwise() -= d.colwise().mean();
  if (!(d.cwiseAbs().maxCoeff() > 1e-12 * scale))
    throw DegeneratePerturbations("perturbations have no spread");
  r.array() -= r.mean();
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(d);
  if (cod.rank() == 0)
    throw DegeneratePerturbations("perturbations have no spread");
  const Eigen::VectorXd g = cod.solve(r);
  PolicyWeights out{};
  for (std::size_t k = 0; k < kFeatureCount; ++k) out[k] = g[k];
  return out;
}

PolicyWeights policy_gradient_step(const PolicyWeights& w,
                                   const std::vector<EpisodeSample>& batch,
                                   double step, bool normalize) {
  return ascend(w, estimate_gradient(batch), step, normalize);
}

PolicyWeights signed_derivative_gradient(const std::vector<CreditSample>& samples) {
  PolicyWeights g{};
  if (samples.empty()) return g;
  for (const auto& c : samples) {
    if (!std::isfinite(c.later_error))
      throw std::invalid_argument("credited error is not finite");
    for (std::size_t k = 0; k < kFeatureCount; ++k) g[k] -= c.phi[k] * c.later_error;
  }
  for (double& v : g) v /= static_cast<double>(samples.size());
  return g;
}

const char* to_string(GradientEstimator e) {
  return e == GradientEstimator::kSignedDerivative ? "signed_derivative"
                                                   : "finite_difference";
}

GradientEstimator gradient_estimator_from_string(const std::string& s) {
  if (s == "finite_difference") return GradientEstimator::kFiniteDifference;
  if (s == "signed_derivative") return GradientEstimator::kSignedDerivative;
  throw std::invalid_argument("estimator must be finite_difference or signed_derivative");
}

void LearnerConfig::validate() const {
  if (!(delta > 0.0) || !(step >= 0.0))
    throw std::invalid_argument("learner delta must be positive and step >= 0");
  if (!(episode_length > 0.0))
    throw std::invalid_argument("episode length must be positive");
  if (batch < 2) throw std::invalid_argument("learner batch must be >= 2");
  if (!(horizon > 0.0) || !(derivative_time >= 0.0))
    throw std::invalid_argument("learner horizon must be positive and derivative_time >= 0");
  if (!(integral_clamp > 0.0))
    throw std::invalid_argument("integral clamp must be positive");
}

PolicyGradientLearner::PolicyGradientLearner(LearnerConfig cfg,
                                             PolicyWeights initial,
                                             double u_min, double u_max)
    : cfg_(cfg), weights_(initial), u_min_(u_min), u_max_(u_max),
      rng_(cfg.seed) {
  cfg_.validate();
  for (double v : weights_)
    if (!std::isfinite(v)) throw std::invalid_argument("weights must be finite");
}

PolicyWeights PolicyGradientLearner::next_perturbation() {
  if (has_flip_) {
    has_flip_ = false;
    return pending_flip_;
  }
  std::bernoulli_distribution coin(0.5);
  PolicyWeights p{};
  for (std::size_t k = 0; k < kFeatureCount; ++k) {
    p[k] = coin(rng_) ? cfg_.delta : -cfg_.delta;
    pending_flip_[k] = -p[k];
  }
  has_flip_ = true;
  return p;
}

void PolicyGradientLearner::start_episode(double t) {
  episode_start_ = t;
  started_ = true;
  const bool perturb =
      cfg_.learning && cfg_.estimator == GradientEstimator::kFiniteDifference;
  perturbation_ = perturb ? next_perturbation() : PolicyWeights{};
  for (std::size_t k = 0; k < kFeatureCount; ++k)
    active_[k] = weights_[k] + perturbation_[k];
  sq_error_ = abs_error_ = 0.0;
  counted_ = 0;
}

void PolicyGradientLearner::finish_episode(double t) {
  const double ret = counted_ > 0 ? -sq_error_ / counted_ : std::nan("");
  episodes_.push_back({static_cast<int>(episodes_.size()), episode_start_, t,
                       weights_, perturbation_, ret, counted_,
                       counted_ > 0 ? abs_error_ / counted_ : std::nan("")});
  if (!cfg_.learning) return;
  if (cfg_.estimator == GradientEstimator::kSignedDerivative) {
    if (credits_.empty()) return;
    weights_ = ascend(weights_, signed_derivative_gradient(credits_), cfg_.step,
                      cfg_.normalize);
    credits_.clear();
    ++updates_;
    return;
  }
  if (counted_ == 0) return;
  batch_.push_back({perturbation_, ret});
  if (static_cast<int>(batch_.size()) >= cfg_.batch) {
    weights_ = policy_gradient_step(weights_, batch_, cfg_.step, cfg_.normalize);
    batch_.clear();
    has_flip_ = false;
    ++updates_;
  }
}

double PolicyGradientLearner::act(double t, const State& measured,
                                  const ReferencePoint& ref, double dt) {
  last_error_ = measured.x1 - ref.altitude;
  if (!started_) start_episode(t);
  if (t >= episode_start_ + cfg_.episode_length - 1e-9) {
    finish_episode(t);
    start_episode(t);
  }
  const FeatureVector phi = features(measured, ref, integral_);
  if (cfg_.learning && cfg_.estimator == GradientEstimator::kSignedDerivative)
    credit(phi, last_error_ + cfg_.derivative_time * (measured.x2 - ref.velocity), dt);
  integral_ = std::clamp(integral_ + last_error_ * dt, -cfg_.integral_clamp,
                         cfg_.integral_clamp);
  double raw = 0.0;
  for (std::size_t k = 0; k < kFeatureCount; ++k) raw += active_[k] * phi[k];
  saturated_ = raw < u_min_ || raw > u_max_;
  return policy_action(active_, phi, u_min_, u_max_);
}

void PolicyGradientLearner::credit(const FeatureVector& phi, double s, double dt) {
  const auto lag = static_cast<std::size_t>(
      std::max(1L, std::lround(cfg_.horizon / dt)));
  while (credit_.size() >= lag) {
    if (credit_.front().usable) credits_.push_back({credit_.front().phi, s});
    credit_.pop_front();
  }
  credit_.push_back({phi, false});
}

void PolicyGradientLearner::observe(bool applied) {
  if (!applied) {
    // The later error no longer reflects the learner's own actions.
    for (auto& c : credit_) c.usable = false;
    return;
  }
  score(last_error_);
  // A clamped action does not move with the weights.
  if (!credit_.empty()) credit_.back().usable = !saturated_;
}

void PolicyGradientLearner::score(double e) {
  sq_error_ += e * e;
  abs_error_ += std::abs(e);
  ++counted_;
}

std::string weights_to_json(const PolicyWeights& w) {
  return array_json(w).dump();
}

PolicyWeights weights_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  PolicyWeights w{};
  for (std::size_t k = 0; k < kFeatureCount; ++k) {
    if (!j.contains(kNames[k]))
      throw std::invalid_argument(std::string("weights JSON lacks ") + kNames[k]);
    w[k] = j.at(kNames[k]).get<double>();
  }
  return w;
}

std::string episode_to_json(const EpisodeRecord& e) {
  nlohmann::json j;
  j["episode"] = e.index;
  j["start"] = e.start;
  j["end"] = e.end;
  j["weights"] = array_json(e.weights);
  j["perturbation"] = array_json(e.perturbation);
  j["return"] = std::isfinite(e.episode_return) ? nlohmann::json(e.episode_return)
                                                : nlohmann::json(nullptr);
  j["learner_steps"] = e.learner_steps;
  j["mean_abs_error"] = std::isfinite(e.mean_abs_error)
                            ? nlohmann::json(e.mean_abs_error)
                            : nlohmann::json(nullptr);
  return j.dump();
}

}  // namespace safelearn
