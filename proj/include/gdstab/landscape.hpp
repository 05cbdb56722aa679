#pragma once

// Geometry of the loss of linear networks: the minimizer in function space,
// points on the manifold of minima M, and the Hessian spectrum along M.

#include "gdstab/model.hpp"
#include "gdstab/rng.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace gdstab {

struct FillingClass {
  int rank_budget = 0;  // r = min over all layer widths
  bool filling = false; // r == min(d_0, d_h)
};

FillingClass classify_architecture(const Architecture& arch);

// d_theta - r (d_0 + d_h - r)
int manifold_dimension(const Architecture& arch);

struct SpectrumOptions {
  // Zero threshold is tau * max(1, lambda_max) with tau = tau_per_param * d_theta.
  double tau_per_param = 1e-8;
  HessianOptions hessian;
};

struct SpectrumReport {
  Vector eigenvalues;  // ascending
  double zero_threshold = 0.0;
  int n_positive = 0;
  int n_zero = 0;
  int n_negative = 0;
  double lambda_max = 0.0;
  // Smallest eigenvalue above the zero threshold, if any.
  std::optional<double> lambda_min_nonzero;
};

SpectrumReport spectrum_of(const Matrix& symmetric, const SpectrumOptions& opts = {});
SpectrumReport spectrum_at(const Problem& problem, const ParamVector& theta,
                           const SpectrumOptions& opts = {});

// Least-squares minimizer of W -> ||Y - W X||^2. Throws RankDeficientError
// when X X^T is numerically singular.
Matrix global_minimizer(const DataBatch& data, double rank_tol = 1e-10);

struct RankConstrainedMinimizer {
  Matrix W;
  Vector singular_values;           // of the unconstrained minimizer
  bool distinct_singular_values = true;
};

// Best approximation of rank <= r. For r < min(d_0, d_h) the data must be
// whitened (X X^T = c I) so that truncating the SVD of the unconstrained
// minimizer is optimal; otherwise WhiteningRequiredError.
RankConstrainedMinimizer rank_constrained_minimizer(const DataBatch& data, int rank,
                                                    double whitening_tol = 1e-9);

// Target W* for an architecture: the rank-constrained minimizer for its
// rank budget.
Matrix minimizer_for(const Problem& problem);

// Explicit factorization W_h ... W_1 = U_r Sigma_r V_r^T. Each interior width
// d_i carries an orthonormal frame B_i (d_i x r) and an invertible r x r
// interleaver A_i; `padding[i]` adds components that the next layer's
// product annihilates. Assembling any choice of interleavers gives a point
// of M.
struct Factorization {
  Architecture arch;
  Matrix left;              // U_r, d_h x r
  Vector root_sigma;        // Sigma_r^{1/h}
  Matrix right;             // V_r, d_0 x r
  std::vector<Matrix> frames;       // B_1 .. B_{h-1}
  std::vector<Matrix> interleavers; // A_1 .. A_{h-1}
  std::vector<Matrix> padding;      // N_2 .. N_h, added as N (I - B B^T)

  Layers layers() const;
  ParamVector assemble() const;
};

struct MinimumSampleOptions {
  double max_condition = 10.0;   // of each interleaver; must not exceed 1e3
  double padding_scale = 0.5;
  int max_attempts = 10;
};

struct MinimumPoint {
  ParamVector theta;
  double residual_gradient_norm = 0.0;
  double product_error = 0.0;  // ||mu(theta) - W*||_F
  Factorization factorization;
};

MinimumPoint sample_minimum(const Problem& problem, Rng& rng, const MinimumSampleOptions& opts = {});

// Balanced factorization with identity interleavers, canonical frames and
// no padding.
Factorization balanced_factorization(const Problem& problem);

struct EtaEstimate {
  double eta_E = 0.0;
  double lambda_E = 0.0;
  int n_samples = 0;
  // lambda_E after each additional sample; non-increasing.
  std::vector<double> running_lambda;
  ParamVector argmin;
};

struct EtaEstimateOptions {
  MinimumSampleOptions sampling;
  SpectrumOptions spectrum;
  bool refine = true;
  int refine_max_evals = 400;
};

// Critical step-size estimate 2 / min_M lambda_min_nonzero: sampled minima,
// each refined by Nelder-Mead over its interleavers. Sample k uses
// substream (seed, k), so the estimate for n samples extends that for n-1.
EtaEstimate eta_E_estimate(const Problem& problem, int n_samples, std::uint64_t seed,
                           const EtaEstimateOptions& opts = {});

struct ProperSample {
  double scale = 0.0;
  double lambda_min_nonzero = 0.0;
};

// Walk along the unbalanced-scaling curve of the balanced minimum: W_1 * s,
// W_h / s.
std::vector<ProperSample> properness_probe(const Problem& problem, std::span<const double> scales,
                                           const SpectrumOptions& opts = {});

struct Box {
  Vector lo;
  Vector hi;

  static Box cube(int dims, double lo, double hi) {
    return Box{Vector::Constant(dims, lo), Vector::Constant(dims, hi)};
  }
};

struct NonsingularityReport {
  double min_abs_det = 0.0;
  double fraction_below_tol = 0.0;
  int n_samples = 0;
  int below_tol = 0;
};

// det(I - eta H(theta)) for a single point: the Jacobian determinant of the
// gradient descent map.
double gd_jacobian_determinant(const Problem& problem, const ParamVector& theta, double eta);

NonsingularityReport nonsingularity_probe(const Problem& problem, double eta, int n_samples,
                                          const Box& box, std::uint64_t seed,
                                          double det_tol = 1e-12, int jobs = 1);

}  // namespace gdstab
