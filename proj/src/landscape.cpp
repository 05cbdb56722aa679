#include "gdstab/landscape.hpp"

#include "gdstab/errors.hpp"
#include "gdstab/parallel.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>

namespace gdstab {

namespace {

void require_linear_mse(const Problem& p, const char* op) {
  if (!p.arch.is_linear() || p.arch.loss_kind != LossKind::mse)
    throw UnsupportedError(std::string(op) + " requires a linear network with MSE loss");
}

Matrix gaussian_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = standard_normal(rng);
  return m;
}

// Q factor of a Gaussian matrix: columns orthonormal.
Matrix random_frame(Rng& rng, int rows, int cols) {
  Eigen::HouseholderQR<Matrix> qr(gaussian_matrix(rng, rows, cols));
  return qr.householderQ() * Matrix::Identity(rows, cols);
}

Matrix random_interleaver(Rng& rng, int r, double max_condition) {
  const double half_log = 0.5 * std::log(max_condition);
  Vector s(r);
  for (int i = 0; i < r; ++i) s[i] = std::exp(uniform(rng, -half_log, half_log));
  return random_frame(rng, r, r) * s.asDiagonal() * random_frame(rng, r, r);
}

double condition_number(const Matrix& a) {
  Eigen::JacobiSVD<Matrix> svd(a);
  const Vector& s = svd.singularValues();
  return s[s.size() - 1] > 0 ? s[0] / s[s.size() - 1] : std::numeric_limits<double>::infinity();
}

// Plain Nelder-Mead simplex minimizer.
struct SimplexResult {
  Vector x;
  double value = std::numeric_limits<double>::infinity();
  int evaluations = 0;
};

SimplexResult nelder_mead(const std::function<double(const Vector&)>& f, const Vector& start,
                          int max_evals, double initial_step = 0.1, double ftol = 1e-13) {
  const Eigen::Index n = start.size();
  std::vector<Vector> pts(n + 1, start);
  std::vector<double> vals(n + 1);
  for (Eigen::Index i = 0; i < n; ++i) pts[i + 1][i] += initial_step * std::max(1.0, std::abs(start[i]));
  int evals = 0;
  auto eval = [&](const Vector& x) {
    ++evals;
    const double v = f(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };
  for (Eigen::Index i = 0; i <= n; ++i) vals[i] = eval(pts[i]);

  std::vector<Eigen::Index> order(n + 1);
  while (evals < max_evals) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return vals[a] < vals[b]; });
    const Eigen::Index best = order.front(), worst = order.back(), second = order[n - 1];
    if (std::isfinite(vals[worst]) &&
        std::abs(vals[worst] - vals[best]) <= ftol * (1.0 + std::abs(vals[best])))
      break;

    Vector centroid = Vector::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) centroid += pts[order[i]];
    centroid /= static_cast<double>(n);

    const Vector reflected = centroid + (centroid - pts[worst]);
    const double fr = eval(reflected);
    if (fr < vals[best]) {
      const Vector expanded = centroid + 2.0 * (centroid - pts[worst]);
      const double fe = eval(expanded);
      if (fe < fr) {
        pts[worst] = expanded;
        vals[worst] = fe;
      } else {
        pts[worst] = reflected;
        vals[worst] = fr;
      }
      continue;
    }
    if (fr < vals[second]) {
      pts[worst] = reflected;
      vals[worst] = fr;
      continue;
    }
    const bool outside = fr < vals[worst];
    const Vector contracted = outside ? Vector(centroid + 0.5 * (reflected - centroid))
                                      : Vector(centroid + 0.5 * (pts[worst] - centroid));
    const double fc = eval(contracted);
    if (fc < std::min(fr, vals[worst])) {
      pts[worst] = contracted;
      vals[worst] = fc;
      continue;
    }
    for (Eigen::Index i = 0; i <= n; ++i) {
      if (i == best) continue;
      pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
      vals[i] = eval(pts[i]);
    }
  }
  const auto it = std::min_element(vals.begin(), vals.end());
  return SimplexResult{pts[it - vals.begin()], *it, evals};
}

}  // namespace

FillingClass classify_architecture(const Architecture& arch) {
  arch.validate();
  const int r = *std::min_element(arch.layer_dims.begin(), arch.layer_dims.end());
  return FillingClass{r, r == std::min(arch.input_dim(), arch.output_dim())};
}

int manifold_dimension(const Architecture& arch) {
  const int r = classify_architecture(arch).rank_budget;
  return arch.param_count() - r * (arch.input_dim() + arch.output_dim() - r);
}

SpectrumReport spectrum_of(const Matrix& symmetric, const SpectrumOptions& opts) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(symmetric, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success)
    throw NumericalError("symmetric eigensolver did not converge (n=" + std::to_string(symmetric.rows()) +
                         ", ||H||_F=" + std::to_string(symmetric.norm()) +
                         ", finite=" + std::to_string(symmetric.allFinite()) + ")");
  SpectrumReport rep;
  rep.eigenvalues = solver.eigenvalues();
  const Eigen::Index n = rep.eigenvalues.size();
  rep.lambda_max = n > 0 ? rep.eigenvalues[n - 1] : 0.0;
  const double tau = opts.tau_per_param * static_cast<double>(n);
  rep.zero_threshold = tau * std::max(1.0, rep.lambda_max);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double v = rep.eigenvalues[i];
    if (v > rep.zero_threshold) {
      ++rep.n_positive;
      if (!rep.lambda_min_nonzero) rep.lambda_min_nonzero = v;
    } else if (v < -rep.zero_threshold) {
      ++rep.n_negative;
    } else {
      ++rep.n_zero;
    }
  }
  return rep;
}

SpectrumReport spectrum_at(const Problem& problem, const ParamVector& theta, const SpectrumOptions& opts) {
  return spectrum_of(hessian(problem, theta, opts.hessian), opts);
}

Matrix global_minimizer(const DataBatch& data, double rank_tol) {
  const Matrix& X = data.X;
  if (X.cols() != data.Y.cols()) throw DimensionError("X and Y have different sample counts");
  if (X.cols() < X.rows())
    throw RankDeficientError("X X^T is rank deficient: " + std::to_string(X.cols()) +
                             " samples for " + std::to_string(X.rows()) + " input dimensions");
  Eigen::JacobiSVD<Matrix> svd(X);
  const Vector& s = svd.singularValues();
  if (!(s[s.size() - 1] > rank_tol * s[0]))
    throw RankDeficientError("X X^T is numerically rank deficient (sigma_min/sigma_max = " +
                             std::to_string(s[s.size() - 1] / s[0]) + ")");
  // Least squares on X^T W^T = Y^T; equivalent to the normal equations
  // W X X^T = Y X^T without squaring the condition number.
  return X.transpose().colPivHouseholderQr().solve(data.Y.transpose()).transpose();
}

RankConstrainedMinimizer rank_constrained_minimizer(const DataBatch& data, int rank, double whitening_tol) {
  if (rank < 1) throw InvalidArgument("rank must be >= 1");
  const Matrix full = global_minimizer(data);
  Eigen::JacobiSVD<Matrix> svd(full, Eigen::ComputeThinU | Eigen::ComputeThinV);
  RankConstrainedMinimizer out;
  out.singular_values = svd.singularValues();
  const Eigen::Index k = out.singular_values.size();
  const int kept = std::min<int>(rank, static_cast<int>(k));
  for (Eigen::Index i = 0; i < k; ++i) {
    if (!(out.singular_values[i] > 0.0)) out.distinct_singular_values = false;
    if (i + 1 < k && out.singular_values[i] - out.singular_values[i + 1] <=
                         1e-10 * std::max(1.0, out.singular_values[0]))
      out.distinct_singular_values = false;
  }
  if (rank >= std::min(full.rows(), full.cols())) {
    out.W = full;
    return out;
  }
  const Matrix cov = data.X * data.X.transpose();
  const double c = cov.trace() / static_cast<double>(cov.rows());
  if ((cov - c * Matrix::Identity(cov.rows(), cov.cols())).norm() > whitening_tol * cov.norm())
    throw WhiteningRequiredError("rank-constrained minimizer needs whitened data (X X^T = c I)");
  out.W = svd.matrixU().leftCols(kept) * out.singular_values.head(kept).asDiagonal() *
          svd.matrixV().leftCols(kept).transpose();
  return out;
}

Matrix minimizer_for(const Problem& problem) {
  require_linear_mse(problem, "minimizer_for");
  problem.validate();
  const FillingClass fc = classify_architecture(problem.arch);
  if (fc.filling) return global_minimizer(problem.data);
  return rank_constrained_minimizer(problem.data, fc.rank_budget).W;
}

Layers Factorization::layers() const {
  const int h = arch.depth();
  const auto& d = arch.layer_dims;
  const Eigen::Index r = root_sigma.size();
  const auto root = root_sigma.asDiagonal();
  Layers out;
  out.weights.resize(h);
  if (h == 1) {
    out.weights[0] = left * root * right.transpose();
    return out;
  }
  out.weights[0] = frames[0] * interleavers[0] * root * right.transpose();
  for (int i = 2; i <= h; ++i) {
    const Matrix& prev_frame = frames[i - 2];
    const Matrix carry = root * interleavers[i - 2].inverse() * prev_frame.transpose();
    Matrix w = (i == h) ? Matrix(left * carry) : Matrix(frames[i - 1] * interleavers[i - 1] * carry);
    if (!padding.empty() && padding[i - 2].size() > 0 && d[i - 1] > r)
      w += padding[i - 2] * (Matrix::Identity(d[i - 1], d[i - 1]) - prev_frame * prev_frame.transpose());
    out.weights[i - 1] = std::move(w);
  }
  return out;
}

ParamVector Factorization::assemble() const { return flatten(arch, layers()); }

namespace {

Factorization factor_target(const Problem& problem, const Matrix& target) {
  const FillingClass fc = classify_architecture(problem.arch);
  const int r = fc.rank_budget;
  const int h = problem.arch.depth();
  Eigen::JacobiSVD<Matrix> svd(target, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Factorization f;
  f.arch = problem.arch;
  f.left = svd.matrixU().leftCols(r);
  f.right = svd.matrixV().leftCols(r);
  f.root_sigma = svd.singularValues().head(r).array().pow(1.0 / h).matrix();
  return f;
}

}  // namespace

Factorization balanced_factorization(const Problem& problem) {
  Factorization f = factor_target(problem, minimizer_for(problem));
  const int r = static_cast<int>(f.root_sigma.size());
  const auto& d = problem.arch.layer_dims;
  for (int i = 1; i < problem.arch.depth(); ++i) {
    f.frames.push_back(Matrix::Identity(d[i], r));
    f.interleavers.push_back(Matrix::Identity(r, r));
  }
  return f;
}

MinimumPoint sample_minimum(const Problem& problem, Rng& rng, const MinimumSampleOptions& opts) {
  require_linear_mse(problem, "sample_minimum");
  if (opts.max_condition < 1.0 || opts.max_condition > 1e3)
    throw InvalidArgument("interleaver condition cap must lie in [1, 1e3]");
  const Matrix target = minimizer_for(problem);
  const Factorization base = factor_target(problem, target);
  const int r = static_cast<int>(base.root_sigma.size());
  const auto& d = problem.arch.layer_dims;
  const int h = problem.arch.depth();
  const double grad_tol = 1e-9 * (1.0 + problem.data.Y.norm());
  const double prod_tol = 1e-9 * (1.0 + target.norm());

  for (int attempt = 0; attempt < opts.max_attempts; ++attempt) {
    Factorization f = base;
    for (int i = 1; i < h; ++i) {
      f.frames.push_back(random_frame(rng, d[i], r));
      f.interleavers.push_back(random_interleaver(rng, r, opts.max_condition));
    }
    for (int i = 2; i <= h; ++i)
      f.padding.push_back(opts.padding_scale * gaussian_matrix(rng, d[i], d[i - 1]));

    MinimumPoint mp;
    mp.theta = f.assemble();
    mp.product_error = (product_map(problem.arch, mp.theta) - target).norm();
    mp.residual_gradient_norm = gradient(problem, mp.theta).norm();
    mp.factorization = std::move(f);
    if (mp.product_error < prod_tol && mp.residual_gradient_norm < grad_tol) return mp;
  }
  throw NumericalError("could not factor the minimizer within tolerance after " +
                       std::to_string(opts.max_attempts) + " attempts");
}

EtaEstimate eta_E_estimate(const Problem& problem, int n_samples, std::uint64_t seed,
                           const EtaEstimateOptions& opts) {
  if (n_samples < 1) throw InvalidArgument("eta_E estimate needs at least one sample");
  require_linear_mse(problem, "eta_E_estimate");
  EtaEstimate est;
  est.n_samples = n_samples;
  double best = std::numeric_limits<double>::infinity();

  auto lambda_of = [&](const ParamVector& theta) {
    const SpectrumReport rep = spectrum_at(problem, theta, opts.spectrum);
    return rep.lambda_min_nonzero.value_or(std::numeric_limits<double>::infinity());
  };

  for (int k = 0; k < n_samples; ++k) {
    Rng rng = substream(seed, {static_cast<std::uint64_t>(k)});
    MinimumPoint mp = sample_minimum(problem, rng, opts.sampling);
    double value = lambda_of(mp.theta);
    ParamVector where = mp.theta;

    Factorization f = mp.factorization;
    if (opts.refine && !f.interleavers.empty()) {
      const Eigen::Index r = f.root_sigma.size();
      const Eigen::Index block = r * r;
      Vector start(block * static_cast<Eigen::Index>(f.interleavers.size()));
      for (std::size_t i = 0; i < f.interleavers.size(); ++i)
        start.segment(static_cast<Eigen::Index>(i) * block, block) =
            Eigen::Map<const Vector>(f.interleavers[i].data(), block);
      auto objective = [&](const Vector& p) {
        for (std::size_t i = 0; i < f.interleavers.size(); ++i) {
          f.interleavers[i] = Eigen::Map<const Matrix>(p.data() + i * block, r, r);
          if (!(condition_number(f.interleavers[i]) < 1e12))
            return std::numeric_limits<double>::infinity();
        }
        return lambda_of(f.assemble());
      };
      const SimplexResult res = nelder_mead(objective, start, opts.refine_max_evals);
      if (res.value < value) {
        objective(res.x);
        value = res.value;
        where = f.assemble();
      }
    }
    if (value < best) {
      best = value;
      est.argmin = where;
    }
    est.running_lambda.push_back(best);
  }
  est.lambda_E = best;
  est.eta_E = 2.0 / best;
  return est;
}

std::vector<ProperSample> properness_probe(const Problem& problem, std::span<const double> scales,
                                           const SpectrumOptions& opts) {
  const Factorization base = balanced_factorization(problem);
  std::vector<ProperSample> out;
  for (double s : scales) {
    Layers layers = base.layers();
    layers.weights.front() *= s;
    layers.weights.back() /= s;
    const SpectrumReport rep = spectrum_at(problem, flatten(problem.arch, layers), opts);
    out.push_back({s, rep.lambda_min_nonzero.value_or(0.0)});
  }
  return out;
}

double gd_jacobian_determinant(const Problem& problem, const ParamVector& theta, double eta) {
  const Matrix H = hessian(problem, theta);
  const Matrix jac = Matrix::Identity(H.rows(), H.cols()) - eta * H;
  return jac.partialPivLu().determinant();
}

NonsingularityReport nonsingularity_probe(const Problem& problem, double eta, int n_samples,
                                          const Box& box, std::uint64_t seed, double det_tol, int jobs) {
  if (!(eta > 0.0)) throw InvalidArgument("eta must be positive");
  if (n_samples < 1) throw InvalidArgument("need at least one sample");
  const int dims = problem.arch.param_count();
  if (box.lo.size() != dims || box.hi.size() != dims)
    throw DimensionError("sampling box dimension does not match parameter count");
  std::vector<double> dets(static_cast<std::size_t>(n_samples));
  parallel_for(dets.size(), jobs, [&](std::size_t i) {
    Rng rng = substream(seed, {static_cast<std::uint64_t>(i)});
    ParamVector theta(dims);
    for (int k = 0; k < dims; ++k) theta[k] = uniform(rng, box.lo[k], box.hi[k]);
    dets[i] = std::abs(gd_jacobian_determinant(problem, theta, eta));
  });
  NonsingularityReport rep;
  rep.n_samples = n_samples;
  rep.min_abs_det = *std::min_element(dets.begin(), dets.end());
  rep.below_tol = static_cast<int>(std::count_if(dets.begin(), dets.end(), [&](double v) { return !(v >= det_tol); }));
  rep.fraction_below_tol = static_cast<double>(rep.below_tol) / n_samples;
  return rep;
}

}  // namespace gdstab
