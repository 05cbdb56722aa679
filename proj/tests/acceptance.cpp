// Acceptance suite: one PASS/FAIL line per criterion. `acceptance N` runs
// criterion N, `acceptance` runs all of them. Tolerances and time limits are
// fixed here; exit status is non-zero if any selected criterion fails.

#include "gdstab/data_io.hpp"
#include "gdstab/dynamics.hpp"
#include "gdstab/experiments.hpp"
#include "gdstab/landscape.hpp"
#include "gdstab/model.hpp"

#include <Eigen/Eigenvalues>

#include <sys/wait.h>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

using namespace gdstab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

ParamVector point(double x, double y) {
  ParamVector t(2);
  t << x, y;
  return t;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "gdstab_acceptance" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Runs the installed binary; returns its exit status and stdout.
std::pair<int, std::string> shell(const std::string& args) {
  const std::string cmd = std::string(GDSTAB_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return {-1, ""};
  std::string out;
  std::array<char, 4096> buf;
  std::size_t got;
  while ((got = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) out.append(buf.data(), got);
  const int raw = pclose(pipe);
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, out};
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  if (!fs::exists(dir)) return files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    files[fs::relative(e.path(), dir).string()] =
        std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  }
  return files;
}

Problem linear_problem(std::vector<int> dims, std::uint64_t seed) {
  Problem p;
  p.arch = Architecture::linear(std::move(dims));
  SyntheticSpec s;
  s.d0 = p.arch.input_dim();
  s.dh = p.arch.output_dim();
  s.n = 12;
  s.rank = std::min(s.d0, s.dh);
  s.noise_sigma = 0.3;
  s.whiten = !classify_architecture(p.arch).filling;
  s.seed = seed;
  p.data = make_synthetic(s);
  return p;
}

// Both branches of xy = 1 inside x^2 + y^2 <= 2/eta as a polyline with nodes
// equally spaced in log x.
double polyline_length(double eta, int segments = 1000000) {
  const double r = 2.0 / eta;
  if (r <= 2.0) return 0.0;
  const double d = std::sqrt(r * r - 4.0);
  const double t0 = 0.5 * std::log((r - d) / 2.0), t1 = 0.5 * std::log((r + d) / 2.0);
  double len = 0.0, px = std::exp(t0), py = 1.0 / px;
  for (int i = 1; i <= segments; ++i) {
    const double x = std::exp(t0 + (t1 - t0) * i / segments), y = 1.0 / x;
    len += std::hypot(x - px, y - py);
    px = x;
    py = y;
  }
  return 2.0 * len;
}

Outcome spectrum_oracle() {
  Outcome o;
  const Problem p = two_neuron_problem();
  double worst = 0.0;
  for (int k = 0; k < 50; ++k) {
    const double a = 0.25 * std::pow(16.0, k / 49.0);
    Eigen::SelfAdjointEigenSolver<Matrix> es(hessian(p, point(a, 1 / a)));
    const double lo = es.eigenvalues()[0], hi = es.eigenvalues()[1];
    worst = std::max({worst, std::abs(lo), std::abs(hi - (a * a + 1 / (a * a)))});
  }
  o.require(worst <= 1e-8, "eigenvalue error above 1e-8");
  o.note("max abs error " + fmt("%.3g", worst));
  return o;
}

Outcome eta_e_recovery() {
  Outcome o;
  const fs::path dir = scratch("eta_e");
  const auto [code, out] = shell("eta-e --example two-neuron --out " + dir.string());
  o.require(code == 0, "exit status " + std::to_string(code));
  if (code != 0) return o;
  const double eta_e = std::stod(out);
  o.require(std::abs(eta_e - 1.0) <= 1e-4, "eta_E off by more than 1e-4");
  o.note("eta_E " + fmt("%.10g", eta_e));
  return o;
}

Outcome convergence_regime() {
  Outcome o;
  const Problem p = two_neuron_problem();
  RunConfig cfg;
  cfg.eta = 0.4;
  int converged = 0;
  double worst_fit = 0.0, worst_sharp = 0.0;
  for (std::size_t i = 0; i < 200; ++i) {
    Rng rng = substream(3, {0, i});
    const RunRecord r = run_gd(p, draw_init(p.arch, InitScheme::two_neuron_box(), rng), cfg);
    if (r.verdict != Verdict::converged) continue;
    ++converged;
    worst_fit = std::max(worst_fit, std::abs(r.final_theta[0] * r.final_theta[1] - 1.0));
    worst_sharp = std::max(worst_sharp, sharpness(p, r.final_theta));
  }
  o.require(worst_fit < 1e-6, "a limit misses xy = 1 by 1e-6");
  o.require(worst_sharp <= 5.0 + 1e-4, "a limit is sharper than 5");
  o.require(converged >= 100, "fewer than half converged");
  o.note(std::to_string(converged) + "/200 converged, max |xy-1| " + fmt("%.3g", worst_fit) + ", max sharpness " +
         fmt("%.6g", worst_sharp));
  return o;
}

Outcome non_convergence_regime() {
  Outcome o;
  SweepSpec s;
  s.eta_grid = {1.2};
  s.n_inits = 200;
  s.seed = 4;
  s.run_cfg.max_iters = 100000;
  const TrapRegionEstimate e = trap_region_sweep(two_neuron_problem(), s).front();
  o.require(e.verdicts[0] == 0, "some run converged");
  o.note(std::to_string(e.verdicts[0]) + "/200 converged, " + std::to_string(e.verdicts[1]) + " diverged, " +
         std::to_string(e.verdicts[2]) + " cycling, " + std::to_string(e.verdicts[3]) + " exhausted");
  return o;
}

Outcome spectrum_counts() {
  Outcome o;
  for (auto dims : std::vector<std::vector<int>>{{2, 3, 2}, {3, 2, 3}, {2, 4, 4, 2}}) {
    const Problem p = linear_problem(dims, 5);
    const int r = classify_architecture(p.arch).rank_budget, d0 = p.arch.input_dim(), dh = p.arch.output_dim();
    Rng rng = substream(6);
    int ok = 0;
    for (int k = 0; k < 10; ++k) {
      const SpectrumReport s = spectrum_at(p, sample_minimum(p, rng).theta);
      ok += s.n_negative == 0 && s.n_zero == manifold_dimension(p.arch) && s.n_positive == r * (d0 + dh - r);
    }
    std::string name;
    for (int d : dims) name += (name.empty() ? "" : ",") + std::to_string(d);
    o.require(ok == 10, "[" + name + "] count mismatch");
    o.note("[" + name + "] " + std::to_string(ok) + "/10");
  }
  return o;
}

Outcome non_singularity() {
  Outcome o;
  Problem linear;
  linear.arch = Architecture::linear({2, 3, 2});
  SyntheticSpec d;
  d.n = 10;
  d.rank = 2;
  d.noise_sigma = 0.3;
  d.seed = 7;
  linear.data = make_synthetic(d);
  for (const auto& [name, p] : {std::pair<std::string, Problem>{"two-neuron", two_neuron_problem()}, {"[2,3,2]", linear}})
    for (double eta : {0.3, 0.9, 2.0}) {
      const auto r = nonsingularity_probe(p, eta, 10000, Box::cube(p.arch.param_count(), -3, 3), 8, 1e-12);
      o.require(r.fraction_below_tol == 0.0, name + " at eta " + fmt("%g", eta) + " hit |det| < 1e-12");
      o.note(name + " eta " + fmt("%g", eta) + " min|det| " + fmt("%.3g", r.min_abs_det));
    }
  return o;
}

Outcome properness() {
  Outcome o;
  const std::vector<double> scales{1, 3, 10, 30, 100};
  const auto probe = properness_probe(two_neuron_problem(), scales);
  bool increasing = true, closed_form = true;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double s = scales[i], expect = s * s + 1 / (s * s);
    closed_form = closed_form && std::abs(probe[i].lambda_min_nonzero - expect) <= 1e-9 * expect;
    if (i > 0) increasing = increasing && probe[i].lambda_min_nonzero > probe[i - 1].lambda_min_nonzero;
  }
  o.require(increasing, "not strictly increasing");
  o.require(probe.back().lambda_min_nonzero > 1e3, "does not exceed 1e3 at s = 100");
  o.require(closed_form, "departs from s^2 + 1/s^2");
  o.note("lambda at s=100 " + fmt("%.10g", probe.back().lambda_min_nonzero));
  return o;
}

Outcome mws_curve() {
  Outcome o;
  const auto curve = normalized_mws_curve(make_grid(0.1, 1.0, 91, false));
  bool decreasing = true;
  for (std::size_t i = 1; i < curve.size(); ++i) decreasing = decreasing && curve[i].normalized < curve[i - 1].normalized;
  o.require(decreasing, "not strictly decreasing");
  o.require(curve.front().normalized == 1.0 && curve.back().normalized == 0.0, "endpoints are not 1 and 0");
  double worst = 0.0;
  for (double eta : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    const double p = polyline_length(eta);
    worst = std::max(worst, std::abs(mws_arclength_2neuron(eta) - p) / p);
  }
  o.require(worst <= 1e-6, "quadrature departs from the polyline");
  o.note("quadrature rel error " + fmt("%.2g", worst));
  const double base = mws_arclength_2neuron(0.1);
  const std::array<std::pair<double, double>, 3> plotted{{{0.3, 0.576}, {0.5, 0.376}, {0.7, 0.246}}};
  for (const auto& [eta, value] : plotted) {
    const double got = mws_arclength_2neuron(eta) / base;
    o.require(std::abs(got - value) <= 0.02, "eta " + fmt("%g", eta) + " gives " + fmt("%.4f", got) + ", plotted " +
                                                 fmt("%.3f", value));
  }
  return o;
}

Outcome derivative_oracles() {
  Outcome o;
  const std::array<Activation, 5> acts{Activation::identity, Activation::relu, Activation::gelu, Activation::tanh,
                                       Activation::sigmoid};
  Rng rng = substream(9);
  double worst_grad = 0.0, worst_hess = 0.0;
  int hess_checked = 0;
  for (int k = 0; k < 100; ++k) {
    Problem p;
    const Activation act = acts[k % 5];
    const LossKind lk = (k / 5) % 2 ? LossKind::softmax_cross_entropy : LossKind::mse;
    const bool bias = act != Activation::identity && (k / 10) % 2;
    std::vector<int> dims{1 + static_cast<int>(rng() % 4)};
    const int layers = 1 + static_cast<int>(rng() % 3);
    for (int l = 0; l < layers; ++l) dims.push_back(1 + static_cast<int>(rng() % 4));
    if (lk == LossKind::softmax_cross_entropy) dims.back() = std::max(dims.back(), 2);
    p.arch = Architecture{dims, act, bias, lk};
    const int n = 2 + static_cast<int>(rng() % 5);
    p.data.X = Matrix(dims.front(), n);
    p.data.Y = Matrix::Zero(dims.back(), n);
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < dims.front(); ++i) p.data.X(i, j) = standard_normal(rng);
      if (lk == LossKind::mse)
        for (int i = 0; i < dims.back(); ++i) p.data.Y(i, j) = standard_normal(rng);
      else
        p.data.Y(j % dims.back(), j) = 1.0;
    }
    ParamVector t(p.arch.param_count());
    for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = 0.8 * standard_normal(rng);

    const ParamVector g = gradient(p, t);
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const double h = 1e-6 * (1 + std::abs(t[i]));
      ParamVector a = t, b = t;
      a[i] += h;
      b[i] -= h;
      const double fd = (loss(p, a) - loss(p, b)) / (2 * h);
      worst_grad = std::max(worst_grad, std::abs(g[i] - fd) / std::max(1.0, std::abs(fd)));
    }
    if (act == Activation::identity && lk == LossKind::mse && !bias) {
      const Matrix fd = finite_difference_hessian(p, t), h = hessian(p, t);
      worst_hess = std::max(worst_hess, (h - fd).norm() / std::max(1.0, h.norm()));
      ++hess_checked;
    }
  }
  o.require(worst_grad < 1e-5, "gradient check failed");
  o.require(worst_hess < 1e-5, "Hessian check failed");
  o.require(hess_checked > 0, "no linear instance drawn");
  o.note("gradient rel error " + fmt("%.2g", worst_grad) + ", Hessian rel error " + fmt("%.2g", worst_hess) + " over " +
         std::to_string(hess_checked) + " linear instances");
  return o;
}

Outcome nonlinear_grid() {
  Outcome o;
  const DataBatch data = make_synthetic(desk_classification_data(0));
  GridSpec grid;
  grid.depths = {2, 4, 8};
  grid.width = 8;
  grid.activation = Activation::gelu;
  grid.loss_kind = LossKind::mse;
  const auto rows = depth_convergence_grid(grid, data, desk_grid_sweep(0));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    const std::string d = "depth " + std::to_string(grid.depths[r]);
    o.require(row.front().ratio == 1.0, d + " below 1 at the smallest eta");
    o.require(row.back().ratio == 0.0, d + " above 0 at the largest eta");
    for (std::size_t i = 1; i < row.size(); ++i)
      o.require(row[i].wilson.lo <= row[i - 1].wilson.hi, d + " rises beyond interval overlap at eta " +
                                                              fmt("%.4g", row[i].eta));
    std::string ratios;
    for (const auto& e : row) ratios += (ratios.empty() ? "" : " ") + fmt("%.2f", e.ratio);
    o.note(d + " [" + ratios + "]");
  }
  return o;
}

Outcome determinism() {
  Outcome o;
  const std::vector<std::pair<std::string, std::string>> runs{
      {"spectrum", "spectrum --arch 2,3,2 --seed 3"},
      {"trajectory", "trajectory --example two-neuron --eta 0.4 --seed 3"},
      {"sweep", "sweep --example two-neuron --eta-grid 0.2:1.2:6 --n 40 --seed 3 --budget 20000 --jobs 8"},
      {"trap", "trap --example two-neuron --eta 0.9 --n 60 --seed 3 --jobs 8"},
      {"mws-length", "mws-length --eta-grid 0.1:1:10"},
      {"eta-e", "eta-e --arch 2,3,2 --n 3 --seed 3"},
      {"nonsing", "nonsing --arch 2,3,2 --eta 0.9 --n 2000 --seed 3 --jobs 8"},
      {"grid", "grid --depths 1,2 --n 4 --eta-grid 0.01:10:3:log --budget 20000 --seed 3 --jobs 8"},
      {"reproduce", "reproduce fig3 --seed 3 --jobs 8"}};
  for (const auto& [name, args] : runs) {
    const fs::path dir = scratch("determinism_" + name);
    const std::string full = args + " --out " + (dir / "run").string();
    const int a = shell(full).first;
    const auto first = snapshot(dir / "run");
    fs::remove_all(dir / "run");
    const int b = shell(full).first;
    const auto second = snapshot(dir / "run");
    o.require(a == 0 && b == 0, name + " failed to run");
    o.require(!first.empty() && first == second, name + " differs between runs");
  }
  // Worker count must not matter either.
  const fs::path dir = scratch("determinism_jobs");
  const std::string base = "sweep --example two-neuron --eta-grid 0.2:1.2:6 --n 40 --seed 3 --budget 20000";
  shell(base + " --jobs 1 --out " + (dir / "one").string());
  shell(base + " --jobs 8 --out " + (dir / "eight").string());
  const auto one = snapshot(dir / "one"), eight = snapshot(dir / "eight");
  o.require(one.count("sweep.csv") && one.at("sweep.csv") == eight.at("sweep.csv"), "--jobs 1 and 8 disagree");
  o.note(std::to_string(runs.size()) + " subcommands rerun; --jobs 1 vs 8 compared");
  return o;
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;
  std::function<Outcome()> check;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "two-neuron spectrum oracle", 1, spectrum_oracle},
      {2, "eta_E recovery", 5, eta_e_recovery},
      {3, "convergence regime at eta 0.4", 30, convergence_regime},
      {4, "non-convergence regime at eta 1.2", 60, non_convergence_regime},
      {5, "spectrum counts at sampled minima", 30, spectrum_counts},
      {6, "non-singularity probe", 60, non_singularity},
      {7, "properness probe", 5, properness},
      {8, "normalized M_WS curve", 5, mws_curve},
      {9, "gradient and Hessian oracles", 60, derivative_oracles},
      {10, "non-linear depth grid", 600, nonlinear_grid},
      {11, "determinism", 600, determinism},
  };
  int selected = 0;
  if (argc > 1) selected = std::atoi(argv[1]);
  bool all_pass = true;
  for (const Criterion& c : all) {
    if (selected != 0 && c.id != selected) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.check();
    } catch (const std::exception& e) {
      out.require(false, std::string("threw: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.require(secs < c.limit_s, "took longer than " + fmt("%g", c.limit_s) + " s");
    all_pass = all_pass && out.pass;
    std::printf("criterion %d %s: %s (%.2f s) %s\n", c.id, c.name, out.pass ? "PASS" : "FAIL", secs, out.detail.c_str());
    std::fflush(stdout);
  }
  return all_pass ? 0 : 1;
}
