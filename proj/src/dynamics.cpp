#include "gdstab/dynamics.hpp"

#include "gdstab/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>

namespace gdstab {

void RunConfig::validate() const {
  if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("run_cfg.eta", "must be a finite value > 0");
  if (max_iters < 1) throw ConfigError("run_cfg.max_iters", "must be >= 1");
  if (!(grad_tol > 0.0)) throw ConfigError("run_cfg.grad_tol", "must be > 0");
  if (!(step_tol > 0.0)) throw ConfigError("run_cfg.step_tol", "must be > 0");
  if (!(diverge_norm > 0.0)) throw ConfigError("run_cfg.diverge_norm", "must be > 0");
  if (!(diverge_loss > 0.0)) throw ConfigError("run_cfg.diverge_loss", "must be > 0");
  if (record_every < 1) throw ConfigError("run_cfg.record_every", "must be >= 1");
  if (cycle_window < 1) throw ConfigError("run_cfg.cycle_window", "must be >= 1");
  if (!(cycle_tol > 0.0)) throw ConfigError("run_cfg.cycle_tol", "must be > 0");
  if (!(cycle_min_amplitude > 0.0)) throw ConfigError("run_cfg.cycle_min_amplitude", "must be > 0");
  if (converge_window < 1) throw ConfigError("run_cfg.converge_window", "must be >= 1");
}

std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::converged: return "converged";
    case Verdict::diverged: return "diverged";
    case Verdict::cycling: return "cycling";
    case Verdict::budget_exhausted: return "budget_exhausted";
  }
  return "?";
}

std::string to_string(CriticalPointKind k) {
  switch (k) {
    case CriticalPointKind::minimum_weakly_stable: return "minimum_weakly_stable";
    case CriticalPointKind::minimum_unstable: return "minimum_unstable";
    case CriticalPointKind::saddle: return "saddle";
    case CriticalPointKind::non_critical: return "non_critical";
  }
  return "?";
}

namespace {

// Shared termination logic of run_gd and run_sgd. One call to `observe`
// per iterate; `advance` then decides whether the run continues.
class Tracker {
 public:
  Tracker(const Problem& problem, const RunConfig& cfg) : problem_(problem), cfg_(cfg) {
    cfg.validate();
    burn_in_ = cfg.max_iters / 2;
  }

  // Evaluates iterate k. Returns true when the run ends at this iterate
  // (divergence or budget).
  bool observe(long k, const ParamVector& theta, const LossGradient& lg) {
    const double gnorm = lg.gradient.norm();
    const double tnorm = theta.norm();
    const bool finite = std::isfinite(lg.loss) && std::isfinite(gnorm) && std::isfinite(tnorm);
    last_ = {k, lg.loss, gnorm, std::nullopt, tnorm};
    if (k % cfg_.record_every == 0) record(theta, finite);
    rec_.final_loss = lg.loss;
    rec_.final_grad_norm = gnorm;
    if (!finite || tnorm > cfg_.diverge_norm || lg.loss > cfg_.diverge_loss) {
      return finish(Verdict::diverged, theta);
    }
    if (k >= cfg_.max_iters) return finish(Verdict::budget_exhausted, theta);
    return false;
  }

  // Called after computing theta_{k+1}. Returns true when the run ends.
  bool advance(long k, const ParamVector& theta, const ParamVector& next) {
    const double step = (next - theta).norm();
    rec_.iterations_used = k + 1;
    if (last_.grad_norm < cfg_.grad_tol && step < cfg_.step_tol) {
      if (++streak_ >= cfg_.converge_window) {
        rec_.iterations_used = k;  // theta_k is reported; the last update is not applied
        return finish(Verdict::converged, theta);
      }
    } else {
      streak_ = 0;
    }
    const long idx = k + 1;
    if (idx > burn_in_) {
      if (anchor_iter_ < 0 || idx - anchor_iter_ > cfg_.cycle_window) {
        anchor_ = next;
        anchor_iter_ = idx;
      } else if ((next - anchor_).norm() < cfg_.cycle_tol && step > cfg_.cycle_min_amplitude) {
        rec_.period = idx - anchor_iter_;
        return finish(Verdict::cycling, next);
      }
    }
    return false;
  }

  RunRecord take() { return std::move(rec_); }

 private:
  void record(const ParamVector& theta, bool finite) {
    TrajectorySample s = last_;
    if (cfg_.record_sharpness && finite) {
      SharpnessOptions so;
      so.max_params = cfg_.sharpness_max_params;
      s.sharpness = sharpness(problem_, theta, so);
    }
    rec_.samples.push_back(s);
  }

  bool finish(Verdict v, const ParamVector& theta) {
    rec_.verdict = v;
    rec_.final_theta = theta;
    if (rec_.samples.empty() || rec_.samples.back().iter != last_.iter) {
      rec_.samples.push_back(last_);
      if (cfg_.record_sharpness && std::isfinite(last_.grad_norm) && std::isfinite(last_.theta_norm) &&
          std::isfinite(last_.loss)) {
        SharpnessOptions so;
        so.max_params = cfg_.sharpness_max_params;
        rec_.samples.back().sharpness = sharpness(problem_, theta, so);
      }
    }
    return true;
  }

  const Problem& problem_;
  const RunConfig& cfg_;
  long burn_in_ = 0;
  int streak_ = 0;
  ParamVector anchor_;
  long anchor_iter_ = -1;
  TrajectorySample last_;
  RunRecord rec_;
};

Problem select_columns(const Problem& problem, std::span<const Eigen::Index> cols) {
  Problem sub;
  sub.arch = problem.arch;
  sub.loss = problem.loss;
  sub.data.X.resize(problem.data.X.rows(), static_cast<Eigen::Index>(cols.size()));
  sub.data.Y.resize(problem.data.Y.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    sub.data.X.col(static_cast<Eigen::Index>(j)) = problem.data.X.col(cols[j]);
    sub.data.Y.col(static_cast<Eigen::Index>(j)) = problem.data.Y.col(cols[j]);
  }
  return sub;
}

}  // namespace

RunRecord run_gd(const Problem& problem, const ParamVector& theta0, const RunConfig& cfg,
                 const TrajectoryObserver& observer) {
  problem.validate();
  Tracker tracker(problem, cfg);
  ParamVector theta = theta0;
  for (long k = 0;; ++k) {
    if (observer) observer(k, theta);
    const LossGradient lg = loss_and_gradient(problem, theta);
    if (tracker.observe(k, theta, lg)) break;
    ParamVector next = theta - cfg.eta * lg.gradient;
    if (tracker.advance(k, theta, next)) break;
    theta = std::move(next);
  }
  return tracker.take();
}

RunRecord run_sgd(const Problem& problem, const ParamVector& theta0, const RunConfig& cfg, int batch_size,
                  Rng& rng, const TrajectoryObserver& observer) {
  problem.validate();
  const Eigen::Index n = problem.data.n();
  if (batch_size < 1 || batch_size > n) throw InvalidArgument("batch size must lie in [1, n]");
  const bool sum_loss = problem.arch.loss_kind == LossKind::mse && !problem.loss.mean;

  Tracker tracker(problem, cfg);
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  ParamVector theta = theta0;
  for (long epoch = 0;; ++epoch) {
    if (observer) observer(epoch, theta);
    const LossGradient full = loss_and_gradient(problem, theta);
    if (tracker.observe(epoch, theta, full)) break;

    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    for (std::size_t i = perm.size() - 1; i > 0; --i)
      std::swap(perm[i], perm[uniform_index(rng, i + 1)]);

    ParamVector next = theta;
    for (Eigen::Index start = 0; start < n; start += batch_size) {
      const Eigen::Index stop = std::min<Eigen::Index>(n, start + batch_size);
      std::vector<Eigen::Index> cols(perm.begin() + start, perm.begin() + stop);
      std::sort(cols.begin(), cols.end());
      const Problem batch = select_columns(problem, cols);
      ParamVector g = gradient(batch, next);
      if (sum_loss) g *= static_cast<double>(n) / static_cast<double>(cols.size());
      next -= cfg.eta * g;
    }
    if (tracker.advance(epoch, theta, next)) break;
    theta = std::move(next);
  }
  return tracker.take();
}

FixedPointReport classify_fixed_point(const Problem& problem, const ParamVector& theta, double eta,
                                      double grad_tol, const SpectrumOptions& opts) {
  if (!(eta > 0.0)) throw InvalidArgument("eta must be positive");
  FixedPointReport rep;
  rep.grad_norm = gradient(problem, theta).norm();
  if (!(rep.grad_norm < grad_tol)) return rep;
  rep.spectrum = spectrum_at(problem, theta, opts);
  const double threshold = 2.0 / eta;
  rep.sharpness_exceeds = rep.spectrum->lambda_max > threshold;
  rep.weakly_stable_minnz = rep.spectrum->lambda_min_nonzero.value_or(0.0) <= threshold;
  if (rep.spectrum->n_negative > 0)
    rep.kind = CriticalPointKind::saddle;
  else
    rep.kind = rep.weakly_stable_minnz ? CriticalPointKind::minimum_weakly_stable
                                       : CriticalPointKind::minimum_unstable;
  return rep;
}

namespace {

struct PowerRun {
  double value = 0.0;
  double residual = std::numeric_limits<double>::infinity();
  double growth = 0.0;  // ||H v|| for the last unit vector v
  int iterations = 0;
  bool converged = false;
};

PowerRun power_run(const HessianVectorProduct& op, Vector v, double shift, double rel_tol, int max_iters) {
  PowerRun out;
  v.normalize();
  for (int it = 1; it <= max_iters; ++it) {
    const Vector w = op(v) + shift * v;
    const double lambda = v.dot(w);
    const double wn = w.norm();
    out.iterations = it;
    out.value = lambda;
    out.growth = wn;
    if (wn == 0.0) {
      out.residual = 0.0;
      out.converged = true;
      return out;
    }
    out.residual = (w - lambda * v).norm() / std::max(std::abs(lambda), std::numeric_limits<double>::min());
    if (out.residual < rel_tol) {
      out.converged = true;
      return out;
    }
    v = w / wn;
  }
  return out;
}

}  // namespace

PowerIterationResult power_iteration_max_eigenvalue(const HessianVectorProduct& hvp, Eigen::Index dim,
                                                    std::uint64_t seed, double rel_tol, int max_iters) {
  Rng rng = substream(seed, {static_cast<std::uint64_t>(dim)});
  Vector v(dim);
  for (Eigen::Index i = 0; i < dim; ++i) v[i] = standard_normal(rng);

  const int plain_budget = max_iters / 2;
  PowerRun plain = power_run(hvp, v, 0.0, rel_tol, plain_budget);
  if (plain.converged && plain.value >= 0.0)
    return {plain.value, plain.residual, plain.iterations};

  // Dominant eigenvalue is negative, or +/- pairs stall the plain iteration:
  // shift by the spectral radius estimate so lambda_max dominates.
  const double shift = 1.05 * std::max(plain.growth, std::abs(plain.value)) + std::numeric_limits<double>::min();
  PowerRun shifted = power_run(hvp, v, shift, rel_tol, max_iters - plain.iterations);
  if (!shifted.converged)
    throw NumericalError("power iteration stagnated after " + std::to_string(max_iters) +
                         " iterations (residual " + std::to_string(shifted.residual) + ")");
  const double lambda = shifted.value - shift;
  const double residual = shifted.residual * std::abs(shifted.value) /
                          std::max(std::abs(lambda), std::numeric_limits<double>::min());
  return {lambda, residual, plain.iterations + shifted.iterations};
}

HessianVectorProduct finite_difference_hvp(const Problem& problem, const ParamVector& theta) {
  const double scale = 1e-5 * (1.0 + theta.cwiseAbs().maxCoeff());
  return [&problem, theta, scale](const Vector& v) -> Vector {
    const double vn = v.norm();
    if (vn == 0.0) return Vector::Zero(v.size());
    const double eps = scale / vn;
    const ParamVector plus = gradient(problem, theta + eps * v);
    const ParamVector minus = gradient(problem, theta - eps * v);
    return (plus - minus) / (2.0 * eps);
  };
}

double sharpness(const Problem& problem, const ParamVector& theta, const SharpnessOptions& opts) {
  const int dims = problem.arch.param_count();
  if (dims <= opts.max_params && !opts.force_power_iteration) {
    HessianOptions ho;
    ho.max_params = opts.max_params;
    return spectrum_of(hessian(problem, theta, ho)).lambda_max;
  }
  return power_iteration_max_eigenvalue(finite_difference_hvp(problem, theta), dims).value;
}

}  // namespace gdstab
