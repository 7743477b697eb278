#include "safelearn/supervisor.h"

#include <cmath>
#include <stdexcept>

#include "safelearn/special_functions.h"

namespace safelearn {

const char* to_string(SupervisorMode m) {
  switch (m) {
    case SupervisorMode::kNone: return "none";
    case SupervisorMode::kBoundary: return "boundary";
    case SupervisorMode::kLocal: return "local";
    case SupervisorMode::kGlobal: return "global";
  }
  return "?";
}

const char* to_string(ActionSource s) {
  return s == ActionSource::kLearner ? "learner" : "safety";
}

const char* to_string(OverrideReason r) {
  switch (r) {
    case OverrideReason::kNone: return "";
    case OverrideReason::kBoundary: return "boundary";
    case OverrideReason::kLambda: return "lambda";
    case OverrideReason::kGamma: return "gamma";
    case OverrideReason::kOutOfGrid: return "out_of_grid";
  }
  return "?";
}

SupervisorMode supervisor_mode_from_string(const std::string& s) {
  if (s == "none") return SupervisorMode::kNone;
  if (s == "boundary" || s == "boundary-only") return SupervisorMode::kBoundary;
  if (s == "local") return SupervisorMode::kLocal;
  if (s == "global") return SupervisorMode::kGlobal;
  throw std::invalid_argument("unknown supervisor mode '" + s +
                              "' (expected none, boundary, local or global)");
}

void SupervisorConfig::validate() const {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("p must lie in (0, 1)");
  if (mode == SupervisorMode::kLocal) validate_threshold(lambda0, p);
  if (mode == SupervisorMode::kGlobal) validate_threshold(gamma0, p);
  if (!(recompute_period > 0.0))
    throw std::invalid_argument("recompute_period must be positive");
  if (max_recomputes < 0 || !(recompute_latency >= 0.0))
    throw std::invalid_argument("recompute count and latency must be >= 0");
  if (!(lookahead >= 0.0)) throw std::invalid_argument("lookahead must be >= 0");
  if (!(margin >= 0.0)) throw std::invalid_argument("margin must be >= 0");
  if (gamma_stride < 1) throw std::invalid_argument("gamma_stride must be >= 1");
  sampling.validate();
}

GuaranteesPtr prior_guarantees(const AffineVerticalModel& model,
                               const Grid2D& grid,
                               const SlabConstraint& constraint,
                               double half_width, const Hyperparams& shape,
                               double p, const SchemeParams& scheme) {
  if (!(half_width > 0.0))
    throw std::invalid_argument("prior bound half-width must be positive");
  const double z = interval_z(p, 1);
  Hyperparams theta = shape;
  theta.sigma_f2 = (half_width / z) * (half_width / z);
  auto bound = DisturbanceBound::constant(-half_width, half_width);
  ReachSolution sol = solve_hji(model, grid, constraint, bound, scheme);
  if (!sol.value.converged)
    throw RecomputeFailed("prior safe set did not converge");
  return std::make_shared<const Guarantees>(
      Guarantees{0, std::move(sol.value), std::move(sol.policy),
                 std::move(bound), Posterior(theta), p, z, 0.0});
}

GuaranteesPtr recompute_guarantees(int version, const Dataset& data,
                                   double data_until, const Hyperparams& init,
                                   const AffineVerticalModel& model,
                                   const Grid2D& grid,
                                   const SlabConstraint& constraint,
                                   const SupervisorConfig& cfg) {
  Hyperparams theta = init;
  if (data.size() >= 5) theta = fit_hyperparameters(data, init, cfg.fit).theta;
  Posterior post(theta, data);
  DisturbanceBound bound = build_bound(post, grid, cfg.p);
  ReachSolution sol = solve_hji(model, grid, constraint, bound, cfg.scheme);
  if (!sol.value.converged)
    throw RecomputeFailed("safe set for version " + std::to_string(version) +
                          " did not converge");
  return std::make_shared<const Guarantees>(
      Guarantees{version, std::move(sol.value), std::move(sol.policy),
                 std::move(bound), std::move(post), cfg.p,
                 interval_z(cfg.p, 1), data_until});
}

Supervisor::Supervisor(SupervisorConfig cfg, AffineVerticalModel model,
                       GuaranteesPtr initial)
    : cfg_(std::move(cfg)),
      model_(model),
      active_(std::move(initial)),
      live_(active_ ? active_->frozen : throw std::invalid_argument(
                                            "supervisor needs initial guarantees")) {
  cfg_.validate();
}

Supervisor::~Supervisor() {
  if (pending_ && pending_->result.valid()) pending_->result.wait();
}

GuaranteesPtr Supervisor::snapshot() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return active_;
}

void Supervisor::install(GuaranteesPtr g) {
  if (!g) throw std::invalid_argument("cannot install empty guarantees");
  {
    std::lock_guard<std::mutex> lock(mutex_);
    if (active_ && g->version <= active_->version)
      throw std::invalid_argument("guarantee versions must increase");
    active_ = g;
  }
  live_ = g->frozen;
  cached_gamma_version_ = -1;
}

ConfidenceQuery Supervisor::query(const Guarantees& g, const State& x) const {
  return ConfidenceQuery{x, &g.frozen, &live_, g.p, g.z, cfg_.conservative};
}

Decision Supervisor::select_action(const State& x, double learner_action) {
  if (!model_.control_admissible(learner_action))
    throw std::invalid_argument("learner action outside the control interval");
  const GuaranteesPtr g = snapshot();
  const long step = steps_++;
  const double nan = std::nan("");
  Decision d{learner_action, ActionSource::kLearner, OverrideReason::kNone,
             g->version, nan, nan, nan};
  const Grid2D& grid = g->value.grid;
  const bool inside = grid.contains(x);
  if (inside) d.value = value_at(g->value, x);

  if (cfg_.mode == SupervisorMode::kNone) return d;

  auto override_with = [&](OverrideReason r, const State& at) {
    d.u = safe_action(g->policy, g->value, at);
    d.source = ActionSource::kSafety;
    d.reason = r;
    return d;
  };
  if (!inside) return override_with(OverrideReason::kOutOfGrid, grid.clamp(x));
  if (!(d.value > cfg_.margin)) return override_with(OverrideReason::kBoundary, x);
  if (cfg_.lookahead > 0.0) {
    const auto iv = g->bound.at(x);
    for (double dist : {iv.lower, iv.upper}) {
      const State next = rk4_step(model_, x, learner_action, dist, cfg_.lookahead);
      if (!grid.contains(next) || !(value_at(g->value, next) > cfg_.margin))
        return override_with(OverrideReason::kBoundary, x);
    }
  }
  if (cfg_.mode == SupervisorMode::kBoundary) return d;

  const ConfidenceQuery q = query(*g, x);
  d.lambda = local_confidence(q);
  if (cfg_.mode == SupervisorMode::kLocal) {
    if (!confidence_threshold_check(d.lambda, cfg_.lambda0, g->p))
      return override_with(OverrideReason::kLambda, x);
    return d;
  }

  if (cached_gamma_version_ != g->version || step % cfg_.gamma_stride == 0) {
    MvnOptions opt = cfg_.mvn;
    opt.seed = cfg_.mvn.seed + static_cast<std::uint64_t>(step) * 97;
    cached_gamma_ = global_confidence_lower(g->value, q, cfg_.sampling, opt).gamma_lower;
    cached_gamma_version_ = g->version;
  }
  d.gamma = cached_gamma_;
  if (!confidence_threshold_check(d.gamma, cfg_.gamma0, g->p))
    return override_with(OverrideReason::kGamma, x);
  return d;
}

void Supervisor::ingest_observation(double t, const State& x, double u,
                                    const StateRate& f_hat) {
  if (!std::isfinite(t) || (!times_.empty() && !(t > times_.back())))
    throw std::invalid_argument("observation timestamps must increase");
  const double r = measure_disturbance(model_, x, u, f_hat);
  Dataset one;
  one.add(x, r);
  one.validate();
  buffer_.append(one);
  times_.push_back(t);
  if (cfg_.mode == SupervisorMode::kLocal || cfg_.mode == SupervisorMode::kGlobal)
    live_ = incremental_update(std::move(live_), one);
}

bool Supervisor::tick(double t) {
  bool swapped = false;
  if (pending_ && t >= pending_->swap_time) {
    try {
      install(pending_->result.get());
      swapped = true;
    } catch (const std::exception& e) {
      failures_.push_back(e.what());
    }
    pending_.reset();
  }
  if (!pending_ && recomputes_started_ < cfg_.max_recomputes) {
    const double cutoff = (recomputes_started_ + 1) * cfg_.recompute_period;
    if (!times_.empty() && times_.back() >= cutoff) {
      Dataset batch;
      for (std::size_t k = 0; k < times_.size() && times_[k] <= cutoff; ++k)
        batch.add(buffer_.inputs[k], buffer_.targets[k]);
      const GuaranteesPtr g = snapshot();
      const int version = g->version + 1;
      const Hyperparams init = g->frozen.hyperparams();
      const Grid2D grid = g->value.grid;
      const SlabConstraint constraint = g->value.constraint;
      pending_ = Pending{
          cutoff + cfg_.recompute_latency,
          std::async(std::launch::async,
                     [=, model = model_, cfg = cfg_, batch = std::move(batch)] {
                       return recompute_guarantees(version, batch, cutoff, init,
                                                   model, grid, constraint, cfg);
                     })};
      ++recomputes_started_;
    }
  }
  return swapped;
}

}  // namespace safelearn
