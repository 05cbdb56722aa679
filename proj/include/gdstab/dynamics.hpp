#pragma once

// Gradient descent as a discrete dynamical system: trajectories, their
// verdicts, and the stability type of fixed points.

#include "gdstab/landscape.hpp"
#include "gdstab/model.hpp"
#include "gdstab/rng.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace gdstab {

struct RunConfig {
  double eta = 0.1;
  long max_iters = 100000;
  double grad_tol = 1e-8;
  double step_tol = 1e-10;
  double diverge_norm = 1e8;
  double diverge_loss = 1e12;
  long record_every = 100;
  long cycle_window = 2000;
  double cycle_tol = 1e-7;
  // A recurrence only counts as a cycle when consecutive iterates are at
  // least this far apart; slowly decaying oscillations stay unclassified.
  double cycle_min_amplitude = 1e-4;
  // Consecutive iterations the convergence test must hold.
  int converge_window = 10;
  bool record_sharpness = false;
  int sharpness_max_params = 2000;

  void validate() const;
};

enum class Verdict { converged, diverged, cycling, budget_exhausted };
std::string to_string(Verdict v);

struct TrajectorySample {
  long iter = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::optional<double> sharpness;
  double theta_norm = 0.0;
};

struct RunRecord {
  Verdict verdict = Verdict::budget_exhausted;
  std::optional<long> period;  // set for cycling
  long iterations_used = 0;    // parameter updates applied
  std::vector<TrajectorySample> samples;
  ParamVector final_theta;
  double final_loss = 0.0;
  double final_grad_norm = 0.0;
};

// Called with (iteration, theta_k) for every visited iterate, starting at
// theta_0.
using TrajectoryObserver = std::function<void(long, const ParamVector&)>;

RunRecord run_gd(const Problem& problem, const ParamVector& theta0, const RunConfig& cfg,
                 const TrajectoryObserver& observer = {});

// Minibatch SGD: every epoch draws a fresh permutation from `rng` and walks
// it in sequential batches. Iteration counts, recording and the verdict
// logic are per epoch and use the full-batch loss and gradient, so
// batch_size == n reproduces run_gd exactly.
RunRecord run_sgd(const Problem& problem, const ParamVector& theta0, const RunConfig& cfg,
                  int batch_size, Rng& rng, const TrajectoryObserver& observer = {});

enum class CriticalPointKind { minimum_weakly_stable, minimum_unstable, saddle, non_critical };
std::string to_string(CriticalPointKind k);

struct FixedPointReport {
  CriticalPointKind kind = CriticalPointKind::non_critical;
  double grad_norm = 0.0;
  std::optional<SpectrumReport> spectrum;
  // lambda_min_nonzero <= 2 / eta (weak stability of a minimum).
  bool weakly_stable_minnz = false;
  // lambda_max > 2 / eta (the sharpness hypothesis used for instability).
  bool sharpness_exceeds = false;
};

FixedPointReport classify_fixed_point(const Problem& problem, const ParamVector& theta, double eta,
                                      double grad_tol = 1e-8, const SpectrumOptions& opts = {});

struct PowerIterationResult {
  double value = 0.0;
  double residual = 0.0;  // ||H v - lambda v|| / |lambda|
  int iterations = 0;
};

using HessianVectorProduct = std::function<Vector(const Vector&)>;

// Largest algebraic eigenvalue of a symmetric operator. The dominant
// eigenvalue is found first; if it is negative the operator is shifted and
// the iteration repeated.
PowerIterationResult power_iteration_max_eigenvalue(const HessianVectorProduct& hvp, Eigen::Index dim,
                                                    std::uint64_t seed = 0, double rel_tol = 1e-6,
                                                    int max_iters = 10000);

// Central-difference Hessian-vector product of the analytic gradient.
HessianVectorProduct finite_difference_hvp(const Problem& problem, const ParamVector& theta);

struct SharpnessOptions {
  int max_params = 2000;
  bool force_power_iteration = false;
};

// lambda_max of the Hessian: dense eigensolve up to max_params, power
// iteration beyond.
double sharpness(const Problem& problem, const ParamVector& theta, const SharpnessOptions& opts = {});

}  // namespace gdstab
