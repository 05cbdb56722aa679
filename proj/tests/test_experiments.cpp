#include "gdstab/errors.hpp"
#include "gdstab/experiments.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>

using namespace gdstab;
namespace fs = std::filesystem;

namespace {

// Both branches of xy = 1 inside x^2 + y^2 <= 2/eta as a polyline with
// nodes equally spaced in log x.
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

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "gdstab_test_experiments" / name;
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("Wilson interval matches reference values") {
  const Interval a = wilson_interval(50, 100);
  CHECK(a.lo == doctest::Approx(0.4038315303659956).epsilon(1e-12));
  CHECK(a.hi == doctest::Approx(0.5961684696340044).epsilon(1e-12));
  const Interval b = wilson_interval(0, 100);
  CHECK(b.lo == 0.0);
  CHECK(b.hi == doctest::Approx(0.03699349820698569).epsilon(1e-12));
  const Interval c = wilson_interval(97, 100);
  CHECK(c.lo == doctest::Approx(0.9154806357094724).epsilon(1e-12));
  CHECK(c.hi == doctest::Approx(0.9897454759759611).epsilon(1e-12));
  CHECK(wilson_interval(100, 100).hi == 1.0);
  CHECK_THROWS_AS(wilson_interval(3, 2), InvalidArgument);
}

TEST_CASE("grids are strictly increasing with exact endpoints") {
  const auto lin = make_grid(0.1, 1.0, 10, false);
  CHECK(lin.size() == 10);
  CHECK(lin.front() == 0.1);
  CHECK(lin.back() == 1.0);
  const auto lg = make_grid(0.01, 10.0, 4, true);
  CHECK(lg[1] == doctest::Approx(0.1));
  CHECK(lg[2] == doctest::Approx(1.0));
  for (std::size_t i = 1; i < lg.size(); ++i) CHECK(lg[i] > lg[i - 1]);
  CHECK_THROWS_AS(make_grid(0.0, 1.0, 3, true), InvalidArgument);
}

TEST_CASE("arc length endpoints and degenerate cases") {
  CHECK(mws_arclength_2neuron(1.5) == 0.0);
  CHECK(mws_arclength_2neuron(1.0) == 0.0);
  // eta = 0.4: x^2 = (5 +- sqrt 21) / 2; the branch length is that of the
  // curve between those abscissae.
  const double lo = std::sqrt((5 - std::sqrt(21.0)) / 2), hi = std::sqrt((5 + std::sqrt(21.0)) / 2);
  CHECK(lo * lo + 1 / (lo * lo) == doctest::Approx(5.0));
  CHECK(hi * hi + 1 / (hi * hi) == doctest::Approx(5.0));
  CHECK(lo * hi == doctest::Approx(1.0));
  CHECK_THROWS_AS(mws_arclength_2neuron(0.0), InvalidArgument);
}

TEST_CASE("arc length quadrature agrees with a dense polyline") {
  for (double eta : {0.1, 0.3, 0.4, 0.5, 0.7, 0.99}) {
    const double q = mws_arclength_2neuron(eta), p = polyline_length(eta);
    CHECK(std::abs(q - p) <= 1e-6 * p);
  }
}

TEST_CASE("normalized curve starts at one, vanishes at eta = 1 and decreases") {
  const auto grid = make_grid(0.1, 1.0, 19, false);
  const auto curve = normalized_mws_curve(grid);
  CHECK(curve.front().normalized == 1.0);
  CHECK(curve.back().normalized == 0.0);
  for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i].normalized < curve[i - 1].normalized);
  CHECK_THROWS_AS(normalized_mws_curve({1.2, 1.5}), InvalidArgument);
}

TEST_CASE("init schemes") {
  Rng rng = substream(1);
  const ParamVector box = draw_init(two_neuron_problem().arch, InitScheme::two_neuron_box(), rng);
  CHECK(box[0] >= -0.2);
  CHECK(box[0] <= 2.5);
  CHECK(box[1] >= 0.0);
  const Architecture wide{{50, 40, 2}, Activation::relu, true, LossKind::mse};
  InitScheme he;
  he.kind = InitKind::he;
  const ParamVector t = draw_init(wide, he, rng);
  const auto first = t.segment(wide.weight_offset(1), 2000);
  CHECK(first.squaredNorm() / 2000 == doctest::Approx(2.0 / 50).epsilon(0.1));
  CHECK(t.segment(wide.bias_offset(1), 40).norm() == 0.0);
  CHECK_THROWS_AS(draw_init(wide, InitScheme::two_neuron_box(), rng), DimensionError);
  CHECK(parse_init_kind("gauss") == InitKind::gaussian);
}

TEST_CASE("sweep spec validation") {
  SweepSpec s;
  s.eta_grid = {0.5, 0.4};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.eta_grid = {0.5};
  s.n_inits = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("two-neuron trap ratio is high for small eta and zero beyond the threshold") {
  SweepSpec s;
  s.eta_grid = {0.1, 1.05, 1.2};
  s.n_inits = 40;
  s.seed = 11;
  s.run_cfg.max_iters = 20000;
  const auto est = trap_region_sweep(two_neuron_problem(), s);
  REQUIRE(est.size() == 3);
  CHECK(est[0].ratio >= 0.9);
  CHECK(est[1].converged == 0);
  CHECK(est[2].converged == 0);
  for (const auto& e : est) {
    CHECK(e.wilson.lo <= e.ratio);
    CHECK(e.ratio <= e.wilson.hi);
    CHECK(e.verdicts[0] + e.verdicts[1] + e.verdicts[2] + e.verdicts[3] == e.total);
  }
}

TEST_CASE("sweep results do not depend on the number of workers") {
  SweepSpec s;
  s.eta_grid = {0.4, 0.9};
  s.n_inits = 30;
  s.seed = 5;
  s.run_cfg.max_iters = 5000;
  const auto one = trap_region_sweep(two_neuron_problem(), s);
  s.jobs = 4;
  const auto four = trap_region_sweep(two_neuron_problem(), s);
  for (std::size_t k = 0; k < one.size(); ++k) {
    CHECK(one[k].converged == four[k].converged);
    CHECK(one[k].verdicts == four[k].verdicts);
  }
}

TEST_CASE("trap ratios are non-increasing in eta up to interval overlap") {
  SweepSpec s;
  s.eta_grid = make_grid(0.1, 1.1, 6, false);
  s.n_inits = 60;
  s.seed = 2;
  s.run_cfg.max_iters = 20000;
  const auto est = trap_region_sweep(two_neuron_problem(), s);
  for (std::size_t i = 1; i < est.size(); ++i) CHECK(est[i].wilson.lo <= est[i - 1].wilson.hi);
}

TEST_CASE("Wilson intervals cover a reference ratio at the nominal rate") {
  SweepSpec s;
  s.eta_grid = {0.9};
  s.run_cfg.max_iters = 20000;
  s.n_inits = 2000;
  s.seed = 1000;
  const double reference = trap_region_sweep(two_neuron_problem(), s).front().ratio;
  REQUIRE(reference > 0.2);
  REQUIRE(reference < 0.9);
  s.n_inits = 60;
  int covered = 0;
  for (int rep = 0; rep < 50; ++rep) {
    s.seed = static_cast<std::uint64_t>(rep);
    const Interval w = trap_region_sweep(two_neuron_problem(), s).front().wilson;
    if (w.lo <= reference && reference <= w.hi) ++covered;
  }
  CHECK(covered >= 45);
}

TEST_CASE("linear depth-2 net never converges past the estimated eta_E") {
  Problem p;
  p.arch = Architecture::linear({2, 3, 2});
  SyntheticSpec d;
  d.n = 10;
  d.rank = 2;
  d.seed = 3;
  p.data = make_synthetic(d);
  EtaEstimateOptions o;
  o.refine_max_evals = 200;
  const double eta_e = eta_E_estimate(p, 5, 1, o).eta_E;
  SweepSpec s;
  s.eta_grid = {1.5 * eta_e, 3.0 * eta_e};
  s.n_inits = 20;
  s.init.kind = InitKind::he;
  s.run_cfg.max_iters = 5000;
  for (const auto& e : trap_region_sweep(p, s)) CHECK(e.converged == 0);
}

TEST_CASE("depth grid collapses from all to none and guards its size") {
  const DataBatch data = make_synthetic(desk_classification_data(0));
  GridSpec g;
  g.depths = {1, 2};
  SweepSpec s = desk_grid_sweep(3);
  s.eta_grid = {s.eta_grid.front(), s.eta_grid.back()};
  s.n_inits = 8;
  const auto rows = depth_convergence_grid(g, data, s);
  REQUIRE(rows.size() == 2);
  for (const auto& row : rows) {
    CHECK(row.front().ratio == 1.0);
    CHECK(row.back().ratio == 0.0);
  }
  CHECK(rows[1].front().verdicts[0] == 8);
  CHECK(grid_architecture(g, 3, data).layer_dims == std::vector<int>{8, 8, 8, 2});
  g.width = 32;
  CHECK_THROWS_AS(depth_convergence_grid(g, data, s), SizeLimitError);
  g.allow_large = true;
  CHECK_NOTHROW(g.validate(data));
}

TEST_CASE("a zero last layer starts every output at gelu(bias) and the loss bound excludes plateaus") {
  const DataBatch data = make_synthetic(desk_classification_data(0));
  GridSpec g;
  const Architecture a = grid_architecture(g, 3, data);
  InitScheme init;
  init.kind = InitKind::he;
  init.zero_last_layer = true;
  Rng rng = substream(4);
  const ParamVector t = draw_init(a, init, rng);
  CHECK(t.segment(a.weight_offset(3), 16).norm() == 0.0);
  CHECK(t.segment(a.weight_offset(2), 64).norm() > 0.0);
  // Zero outputs against one-hot labels: the loss is exactly one per sample.
  const Problem p{a, data, {}};
  CHECK(loss(p, t) == doctest::Approx(static_cast<double>(data.n())).epsilon(1e-12));

  // A point far out on a saturated plateau has a vanishing gradient but no fit.
  ParamVector dead = ParamVector::Zero(a.param_count());
  dead.segment(a.bias_offset(3), 2).setConstant(-60.0);
  CHECK(gradient(p, dead).norm() < 1e-300);
  SweepSpec s;
  s.eta_grid = {0.01};
  s.n_inits = 3;
  s.init.kind = InitKind::uniform_box;
  s.init.lo = dead;
  s.init.hi = dead;
  s.run_cfg = desk_grid_run_config();
  const TrapRegionEstimate unbounded = trap_region_sweep(p, s).front();
  CHECK(unbounded.verdicts[0] == 3);
  CHECK(unbounded.converged == 3);
  s.max_final_loss = 1e-4;
  const TrapRegionEstimate bounded = trap_region_sweep(p, s).front();
  CHECK(bounded.verdicts[0] == 3);
  CHECK(bounded.converged == 0);
  s.max_final_loss = -1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("fig3 and fig4 datasets") {
  const fs::path dir = scratch("figs");
  const auto m3 = reproduce_figure(FigureId::fig3, dir / "fig3");
  CHECK(m3["eta"] == 0.4);
  REQUIRE(m3["inits"].size() == 5);
  for (const auto& init : m3["inits"]) {
    CHECK(init[0].get<double>() >= -0.2);
    CHECK(init[0].get<double>() <= 2.5);
    CHECK(init[1].get<double>() >= 0.0);
    CHECK(init[1].get<double>() <= 2.5);
  }
  for (const char* key : {"schema_version", "command", "seed", "arch", "data", "run_cfg", "outputs"})
    CHECK(m3.contains(key));

  reproduce_figure(FigureId::fig4, dir / "fig4");
  const auto rows = read_csv(dir / "fig4" / "fig4_trajectory.csv");
  REQUIRE(rows.size() == 10002);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double x = std::stod(rows[i][2]), y = std::stod(rows[i][3]);
    CHECK((x >= 0 && x <= 2 && y >= 0 && y <= 2));
  }
}

TEST_CASE("figure datasets are byte-identical across reruns") {
  const fs::path a = scratch("rerun_a"), b = scratch("rerun_b");
  reproduce_figure(FigureId::fig3, a);
  reproduce_figure(FigureId::fig3, b);
  CHECK(slurp(a / "fig3_trajectories.csv") == slurp(b / "fig3_trajectories.csv"));
  CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
  CHECK_THROWS_AS(parse_figure_id("fig9"), InvalidArgument);
}
