#include "gdstab/experiments.hpp"

#include "gdstab/errors.hpp"
#include "gdstab/parallel.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cmath>
#include <limits>

namespace gdstab {

namespace {
constexpr double kWilsonZ = 1.959963984540054;  // two-sided 95%
}

std::string to_string(InitKind k) {
  switch (k) {
    case InitKind::uniform_box: return "box";
    case InitKind::gaussian: return "gauss";
    case InitKind::he: return "he";
  }
  return "?";
}

InitKind parse_init_kind(std::string_view name) {
  if (name == "box" || name == "uniform_box") return InitKind::uniform_box;
  if (name == "gauss" || name == "gaussian") return InitKind::gaussian;
  if (name == "he") return InitKind::he;
  throw InvalidArgument("unknown init scheme '" + std::string(name) + "'");
}

InitScheme InitScheme::two_neuron_box() {
  InitScheme s;
  s.kind = InitKind::uniform_box;
  s.lo = Vector(2);
  s.lo << -0.2, 0.0;
  s.hi = Vector(2);
  s.hi << 2.5, 2.5;
  return s;
}

void InitScheme::validate() const {
  if (kind == InitKind::uniform_box) {
    if (lo.size() != hi.size() || lo.size() == 0) throw ConfigError("init.lo", "box bounds must have equal, non-zero length");
    for (Eigen::Index i = 0; i < lo.size(); ++i)
      if (!(lo[i] <= hi[i])) throw ConfigError("init.hi", "every upper bound must be >= its lower bound");
  }
  if (kind == InitKind::gaussian && !(sigma > 0.0)) throw ConfigError("init.sigma", "must be > 0");
}

ParamVector draw_init(const Architecture& arch, const InitScheme& scheme, Rng& rng) {
  const int dim = arch.param_count();
  ParamVector theta(dim);
  switch (scheme.kind) {
    case InitKind::uniform_box: {
      const bool broadcast = scheme.lo.size() == 1;
      if (!broadcast && scheme.lo.size() != dim)
        throw DimensionError("init box has " + std::to_string(scheme.lo.size()) + " coordinates, model has " +
                             std::to_string(dim) + " parameters");
      for (int i = 0; i < dim; ++i) {
        const Eigen::Index j = broadcast ? 0 : i;
        theta[i] = uniform(rng, scheme.lo[j], scheme.hi[j]);
      }
      break;
    }
    case InitKind::gaussian:
      for (int i = 0; i < dim; ++i) theta[i] = scheme.sigma * standard_normal(rng);
      break;
    case InitKind::he: {
      theta.setZero();
      for (int layer = 1; layer <= arch.depth(); ++layer) {
        const int fan_in = arch.layer_dims[layer - 1];
        const int count = fan_in * arch.layer_dims[layer];
        const double sd = std::sqrt(2.0 / fan_in);
        const int off = arch.weight_offset(layer);
        for (int i = 0; i < count; ++i) theta[off + i] = sd * standard_normal(rng);
      }
      break;
    }
  }
  if (scheme.zero_last_layer) {
    const int h = arch.depth();
    theta.segment(arch.weight_offset(h), arch.layer_dims[h] * arch.layer_dims[h - 1]).setZero();
  }
  return theta;
}

void SweepSpec::validate() const {
  if (eta_grid.empty()) throw ConfigError("eta_grid", "must not be empty");
  for (std::size_t i = 0; i < eta_grid.size(); ++i) {
    if (!(eta_grid[i] > 0.0) || !std::isfinite(eta_grid[i]))
      throw ConfigError("eta_grid[" + std::to_string(i) + "]", "must be a positive finite step size");
    if (i > 0 && !(eta_grid[i] > eta_grid[i - 1]))
      throw ConfigError("eta_grid[" + std::to_string(i) + "]", "grid must be strictly increasing");
  }
  if (n_inits < 1) throw ConfigError("n_inits", "must be >= 1");
  if (jobs < 1) throw ConfigError("jobs", "must be >= 1");
  if (!(max_final_loss >= 0.0)) throw ConfigError("max_final_loss", "must be >= 0");
  if (optimizer.kind == OptimizerKind::sgd && optimizer.batch_size < 1)
    throw ConfigError("optimizer.batch_size", "must be >= 1");
  init.validate();
  RunConfig probe = run_cfg;
  probe.eta = eta_grid.front();
  probe.validate();
}

std::vector<double> make_grid(double lo, double hi, int steps, bool log_spaced) {
  if (steps < 1) throw InvalidArgument("grid needs at least one step");
  if (!(lo > 0.0) || !(hi >= lo) || !std::isfinite(hi)) throw InvalidArgument("grid bounds must satisfy 0 < lo <= hi");
  if (steps == 1) {
    if (lo != hi) throw InvalidArgument("a one-point grid needs lo == hi");
    return {lo};
  }
  if (!(hi > lo)) throw InvalidArgument("grid bounds must satisfy lo < hi");
  std::vector<double> grid(steps);
  for (int i = 0; i < steps; ++i) {
    const double t = static_cast<double>(i) / (steps - 1);
    grid[i] = log_spaced ? std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo))) : lo + t * (hi - lo);
  }
  grid.front() = lo;
  grid.back() = hi;
  return grid;
}

Interval wilson_interval(int successes, int total) {
  if (total < 1 || successes < 0 || successes > total) throw InvalidArgument("wilson_interval needs 0 <= k <= n, n >= 1");
  const double n = total;
  const double p = successes / n;
  const double z2 = kWilsonZ * kWilsonZ;
  const double denom = 1.0 + z2 / n;
  const double centre = (p + z2 / (2.0 * n)) / denom;
  const double half = kWilsonZ / denom * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n));
  Interval out{std::max(0.0, centre - half), std::min(1.0, centre + half)};
  // Keep the interval closed around p despite rounding at k = 0 or k = n.
  out.lo = std::min(out.lo, p);
  out.hi = std::max(out.hi, p);
  return out;
}

std::vector<TrapRegionEstimate> trap_region_sweep(const Problem& problem, const SweepSpec& spec) {
  problem.validate();
  spec.validate();
  const std::size_t n_eta = spec.eta_grid.size();
  const std::size_t n_init = static_cast<std::size_t>(spec.n_inits);
  std::vector<Verdict> verdicts(n_eta * n_init);
  std::vector<char> trapped(n_eta * n_init, 0);

  parallel_for(verdicts.size(), spec.jobs, [&](std::size_t item) {
    const std::size_t k = item / n_init, i = item % n_init;
    Rng rng = substream(spec.seed, {k, i});
    const ParamVector theta0 = draw_init(problem.arch, spec.init, rng);
    RunConfig cfg = spec.run_cfg;
    cfg.eta = spec.eta_grid[k];
    cfg.record_sharpness = false;
    const RunRecord rec = spec.optimizer.kind == OptimizerKind::sgd
                              ? run_sgd(problem, theta0, cfg, spec.optimizer.batch_size, rng)
                              : run_gd(problem, theta0, cfg);
    verdicts[item] = rec.verdict;
    trapped[item] = rec.verdict == Verdict::converged && rec.final_loss <= spec.max_final_loss;
  });

  std::vector<TrapRegionEstimate> out(n_eta);
  for (std::size_t k = 0; k < n_eta; ++k) {
    TrapRegionEstimate& e = out[k];
    e.eta = spec.eta_grid[k];
    e.total = spec.n_inits;
    for (std::size_t i = 0; i < n_init; ++i) {
      ++e.verdicts[static_cast<int>(verdicts[k * n_init + i])];
      e.converged += trapped[k * n_init + i];
    }
    e.ratio = static_cast<double>(e.converged) / e.total;
    e.wilson = wilson_interval(e.converged, e.total);
  }
  return out;
}

double mws_arclength_2neuron(double eta) {
  if (!(eta > 0.0) || !std::isfinite(eta)) throw InvalidArgument("eta must be positive and finite");
  const double r = 2.0 / eta;  // radius squared of the admissible disc
  if (r <= 2.0) return 0.0;
  const double disc = std::sqrt((r - 2.0) * (r + 2.0));
  // x_lo^2 = (r - disc)/2 written without cancellation; x_hi = 1 / x_lo.
  const double x_lo = std::sqrt(2.0 / (r + disc));
  const double x_hi = std::sqrt((r + disc) / 2.0);
  auto integrand = [](double x) { return std::sqrt(1.0 + 1.0 / (x * x * x * x)); };
  // The integrand is symmetric under x -> 1/x up to the Jacobian, so split at
  // x = 1 where both halves are smooth.
  using boost::math::quadrature::gauss_kronrod;
  const double tol = 1e-13;
  const double left = gauss_kronrod<double, 31>::integrate(integrand, x_lo, 1.0, 20, tol);
  const double right = gauss_kronrod<double, 31>::integrate(integrand, 1.0, x_hi, 20, tol);
  return 2.0 * (left + right);
}

std::vector<MwsPoint> normalized_mws_curve(const std::vector<double>& eta_grid) {
  if (eta_grid.empty()) throw InvalidArgument("eta grid must not be empty");
  for (std::size_t i = 1; i < eta_grid.size(); ++i)
    if (!(eta_grid[i] > eta_grid[i - 1])) throw InvalidArgument("eta grid must be strictly increasing");
  const double base = mws_arclength_2neuron(eta_grid.front());
  if (!(base > 0.0)) throw InvalidArgument("the first grid point must have a non-empty weakly stable set (eta < 1)");
  std::vector<MwsPoint> out;
  out.reserve(eta_grid.size());
  for (double eta : eta_grid) {
    const double len = mws_arclength_2neuron(eta);
    out.push_back({eta, len, len / base});
  }
  return out;
}

void GridSpec::validate(const DataBatch& data) const {
  if (depths.empty()) throw ConfigError("grid.depths", "must not be empty");
  for (std::size_t i = 0; i < depths.size(); ++i)
    if (depths[i] < 1) throw ConfigError("grid.depths[" + std::to_string(i) + "]", "must be >= 1");
  if (width < 1) throw ConfigError("grid.width", "must be >= 1");
  if (!allow_large) {
    if (data.X.rows() > 64)
      throw SizeLimitError("input dimension " + std::to_string(data.X.rows()) +
                           " exceeds the desk-scale limit 64; pass the large-model flag to allow it");
    if (width > 16)
      throw SizeLimitError("hidden width " + std::to_string(width) +
                           " exceeds the desk-scale limit 16; pass the large-model flag to allow it");
  }
}

Architecture grid_architecture(const GridSpec& grid, int depth, const DataBatch& data) {
  Architecture arch;
  arch.layer_dims.push_back(static_cast<int>(data.X.rows()));
  for (int i = 1; i < depth; ++i) arch.layer_dims.push_back(grid.width);
  arch.layer_dims.push_back(static_cast<int>(data.Y.rows()));
  arch.activation = grid.activation;
  arch.use_bias = grid.use_bias;
  arch.loss_kind = grid.loss_kind;
  arch.validate();
  return arch;
}

std::vector<std::vector<TrapRegionEstimate>> depth_convergence_grid(const GridSpec& grid, const DataBatch& data,
                                                                    const SweepSpec& spec) {
  grid.validate(data);
  spec.validate();
  std::vector<std::vector<TrapRegionEstimate>> rows;
  rows.reserve(grid.depths.size());
  for (std::size_t r = 0; r < grid.depths.size(); ++r) {
    Problem problem{grid_architecture(grid, grid.depths[r], data), data, {}};
    SweepSpec row_spec = spec;
    row_spec.seed = substream(spec.seed, {0x6772696455ULL, r})();
    rows.push_back(trap_region_sweep(problem, row_spec));
  }
  return rows;
}

std::string to_string(FigureId f) {
  switch (f) {
    case FigureId::fig3: return "fig3";
    case FigureId::fig4: return "fig4";
    case FigureId::fig2: return "fig2";
    case FigureId::conv: return "conv";
    case FigureId::exp: return "exp";
  }
  return "?";
}

FigureId parse_figure_id(std::string_view name) {
  for (FigureId f : {FigureId::fig3, FigureId::fig4, FigureId::fig2, FigureId::conv, FigureId::exp})
    if (name == to_string(f)) return f;
  throw InvalidArgument("unknown figure '" + std::string(name) + "' (expected fig3, fig4, fig2, conv or exp)");
}

nlohmann::json to_json(const Architecture& arch) {
  return {{"layer_dims", arch.layer_dims},
          {"activation", to_string(arch.activation)},
          {"use_bias", arch.use_bias},
          {"loss", to_string(arch.loss_kind)},
          {"param_count", arch.param_count()}};
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"eta", c.eta},
          {"max_iters", c.max_iters},
          {"grad_tol", c.grad_tol},
          {"step_tol", c.step_tol},
          {"diverge_norm", c.diverge_norm},
          {"diverge_loss", c.diverge_loss},
          {"record_every", c.record_every},
          {"cycle_window", c.cycle_window},
          {"cycle_tol", c.cycle_tol},
          {"cycle_min_amplitude", c.cycle_min_amplitude},
          {"converge_window", c.converge_window},
          {"record_sharpness", c.record_sharpness},
          {"sharpness_max_params", c.sharpness_max_params}};
}

nlohmann::json to_json(const InitScheme& s) {
  nlohmann::json j{{"kind", to_string(s.kind)}};
  if (s.kind == InitKind::uniform_box) {
    j["lo"] = std::vector<double>(s.lo.data(), s.lo.data() + s.lo.size());
    j["hi"] = std::vector<double>(s.hi.data(), s.hi.data() + s.hi.size());
  }
  if (s.kind == InitKind::gaussian) j["sigma"] = s.sigma;
  j["zero_last_layer"] = s.zero_last_layer;
  return j;
}

nlohmann::json to_json(const SweepSpec& s) {
  nlohmann::json j{{"eta_grid", s.eta_grid},
                   {"n_inits", s.n_inits},
                   {"init", to_json(s.init)},
                   {"seed", s.seed},
                   {"run_cfg", to_json(s.run_cfg)},
                   {"optimizer", s.optimizer.kind == OptimizerKind::gd ? "gd" : "sgd"}};
  if (s.optimizer.kind == OptimizerKind::sgd) j["batch_size"] = s.optimizer.batch_size;
  // JSON has no infinity; an absent bound means unbounded.
  if (std::isfinite(s.max_final_loss)) j["max_final_loss"] = s.max_final_loss;
  return j;
}

nlohmann::json to_json(const SyntheticSpec& s) {
  nlohmann::json j{{"kind", to_string(s.kind)}, {"seed", s.seed}};
  switch (s.kind) {
    case SyntheticKind::scalar_pair:
      j["x"] = s.x;
      j["y"] = s.y;
      return j;
    case SyntheticKind::linear_teacher: j["rank"] = s.rank; break;
    case SyntheticKind::gaussian_blobs:
      j["classes"] = s.classes;
      j["blob_sigma"] = s.blob_sigma;
      j["blob_separation"] = s.blob_separation;
      break;
  }
  j["d0"] = s.d0;
  j["dh"] = s.dh;
  j["n"] = s.n;
  j["noise_sigma"] = s.noise_sigma;
  j["whiten"] = s.whiten;
  return j;
}

SyntheticSpec desk_classification_data(std::uint64_t seed) {
  SyntheticSpec s;
  s.kind = SyntheticKind::gaussian_blobs;
  s.d0 = 8;
  s.dh = 2;
  s.classes = 2;
  s.n = 8;
  s.blob_sigma = 0.5;
  s.blob_separation = 1.0;
  s.whiten = true;
  s.seed = seed;
  return s;
}

RunConfig desk_grid_run_config() {
  RunConfig c;
  c.max_iters = 200000;
  c.grad_tol = 1e-3;
  c.step_tol = 1e-4;
  c.cycle_window = 1000;
  return c;
}

SweepSpec desk_grid_sweep(std::uint64_t seed, int jobs) {
  SweepSpec s;
  s.eta_grid = make_grid(0.002, 10.0, 7, true);
  s.n_inits = 50;
  s.init.kind = InitKind::he;
  s.init.zero_last_layer = true;
  s.seed = seed;
  s.run_cfg = desk_grid_run_config();
  s.jobs = jobs;
  s.max_final_loss = 1e-4;
  return s;
}

Table trap_table(const std::vector<TrapRegionEstimate>& estimates) {
  Table t;
  t.header = {"eta", "converged", "total", "ratio", "wilson_lo", "wilson_hi", "diverged", "cycling", "budget_exhausted"};
  for (const auto& e : estimates)
    t.rows.push_back({e.eta, static_cast<long long>(e.converged), static_cast<long long>(e.total), e.ratio,
                      e.wilson.lo, e.wilson.hi, static_cast<long long>(e.verdicts[1]),
                      static_cast<long long>(e.verdicts[2]), static_cast<long long>(e.verdicts[3])});
  return t;
}

namespace {

nlohmann::json base_manifest(FigureId figure, const ReproduceOptions& opts) {
  return {{"schema_version", kSchemaVersion},
          {"tool_version", kToolVersion},
          {"command", "reproduce " + to_string(figure)},
          {"seed", opts.seed}};
}

// One row per visited iterate of the two-neuron example.
void append_trajectory(Table& t, long long run, const Problem& problem, const ParamVector& theta0, double eta,
                       long steps, bool stop_on_verdict) {
  auto row = [&](long k, const ParamVector& th) {
    t.rows.push_back({run, static_cast<long long>(k), th[0], th[1], loss(problem, th)});
  };
  if (stop_on_verdict) {
    RunConfig cfg;
    cfg.eta = eta;
    cfg.max_iters = steps;
    run_gd(problem, theta0, cfg, row);
    return;
  }
  ParamVector th = theta0;
  row(0, th);
  for (long k = 1; k <= steps; ++k) {
    th = gd_step(problem, th, eta);
    row(k, th);
  }
}

nlohmann::json two_neuron_arch_json() { return to_json(two_neuron_problem().arch); }

}  // namespace

nlohmann::json reproduce_figure(FigureId figure, const std::filesystem::path& out_dir, const ReproduceOptions& opts) {
  if (opts.jobs < 1) throw InvalidArgument("jobs must be >= 1");
  nlohmann::json m = base_manifest(figure, opts);
  std::vector<std::string> outputs;
  const Problem two = two_neuron_problem();

  switch (figure) {
    case FigureId::fig3: {
      const double eta = 0.4;
      const std::vector<std::array<double, 2>> inits{{2.4, 0.617}, {0.7, 2.429}, {1.6, 2.0}, {1.0, 0.01}, {0.01, 1.1}};
      Table t;
      t.header = {"run", "iter", "x", "y", "loss"};
      for (std::size_t r = 0; r < inits.size(); ++r) {
        ParamVector th(2);
        th << inits[r][0], inits[r][1];
        append_trajectory(t, static_cast<long long>(r), two, th, eta, 10000, true);
      }
      write_csv(t, out_dir / "fig3_trajectories.csv");
      outputs.push_back("fig3_trajectories.csv");
      RunConfig cfg;
      cfg.eta = eta;
      cfg.max_iters = 10000;
      m["arch"] = two_neuron_arch_json();
      m["data"] = {{"kind", "scalar_pair"}, {"x", 1.0}, {"y", 1.0}};
      m["run_cfg"] = to_json(cfg);
      m["eta"] = eta;
      m["inits"] = inits;
      m["region"] = {{"lo", {-0.2, 0.0}}, {"hi", {2.5, 2.5}}};
      break;
    }
    case FigureId::fig4: {
      const double eta = 1.1;
      const long steps = 10000;
      Table t;
      t.header = {"run", "iter", "x", "y", "loss"};
      ParamVector th(2);
      th << 1.1, 0.809;
      append_trajectory(t, 0, two, th, eta, steps, false);
      write_csv(t, out_dir / "fig4_trajectory.csv");
      outputs.push_back("fig4_trajectory.csv");
      RunConfig cfg;
      cfg.eta = eta;
      cfg.max_iters = steps;
      m["arch"] = two_neuron_arch_json();
      m["data"] = {{"kind", "scalar_pair"}, {"x", 1.0}, {"y", 1.0}};
      m["run_cfg"] = to_json(cfg);
      m["eta"] = eta;
      m["inits"] = {{1.1, 0.809}};
      m["steps"] = steps;
      m["region"] = {{"lo", {0.7, 0.65}}, {"hi", {1.25, 1.2}}};
      break;
    }
    case FigureId::fig2: {
      std::vector<double> grid;
      for (int i = 0; i <= 22; ++i) grid.push_back(0.1 + 0.05 * i);  // 0.10 .. 1.20
      Table curve;
      curve.header = {"eta", "length", "normalized"};
      std::vector<double> mws_grid;
      for (double e : grid)
        if (e <= 1.0 + 1e-12) mws_grid.push_back(e);
      for (const auto& p : normalized_mws_curve(mws_grid)) curve.rows.push_back({p.eta, p.length, p.normalized});
      write_csv(curve, out_dir / "fig2_mws.csv");
      outputs.push_back("fig2_mws.csv");

      SweepSpec spec;
      spec.eta_grid = grid;
      spec.n_inits = 200;
      spec.seed = opts.seed;
      spec.jobs = opts.jobs;
      spec.run_cfg.max_iters = 20000;
      write_csv(trap_table(trap_region_sweep(two, spec)), out_dir / "fig2_trap.csv");
      outputs.push_back("fig2_trap.csv");
      m["arch"] = two_neuron_arch_json();
      m["data"] = {{"kind", "scalar_pair"}, {"x", 1.0}, {"y", 1.0}};
      m["run_cfg"] = to_json(spec.run_cfg);
      m["sweep"] = to_json(spec);
      m["normalized_at"] = mws_grid.front();
      break;
    }
    case FigureId::conv:
    case FigureId::exp: {
      const SyntheticSpec data_spec = desk_classification_data(opts.seed);
      const DataBatch data = make_synthetic(data_spec);
      GridSpec grid;
      grid.depths = figure == FigureId::conv ? std::vector<int>{2, 4, 8} : std::vector<int>{2};
      const SweepSpec spec = desk_grid_sweep(opts.seed, opts.jobs);
      const auto rows = depth_convergence_grid(grid, data, spec);
      Table t;
      t.header = {"depth", "eta", "converged", "total", "ratio", "wilson_lo", "wilson_hi"};
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (const auto& e : rows[r])
          t.rows.push_back({static_cast<long long>(grid.depths[r]), e.eta, static_cast<long long>(e.converged),
                            static_cast<long long>(e.total), e.ratio, e.wilson.lo, e.wilson.hi});
      const std::string name = to_string(figure) + "_grid.csv";
      write_csv(t, out_dir / name);
      outputs.push_back(name);
      m["arch"] = to_json(grid_architecture(grid, grid.depths.front(), data));
      m["depths"] = grid.depths;
      m["width"] = grid.width;
      m["data"] = to_json(data_spec);
      m["run_cfg"] = to_json(spec.run_cfg);
      m["sweep"] = to_json(spec);
      break;
    }
  }
  m["outputs"] = outputs;
  write_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace gdstab
