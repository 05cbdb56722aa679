#pragma once

// Monte Carlo trap-region sweeps, the weakly-stable arc length of the
// two-neuron example, depth grids and figure datasets.

#include "gdstab/data_io.hpp"
#include "gdstab/dynamics.hpp"
#include "gdstab/landscape.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

namespace gdstab {

enum class InitKind { uniform_box, gaussian, he };
std::string to_string(InitKind k);
InitKind parse_init_kind(std::string_view name);

struct InitScheme {
  InitKind kind = InitKind::uniform_box;
  // uniform_box bounds; a single entry is broadcast to every coordinate.
  Vector lo = Vector::Constant(1, -1.0);
  Vector hi = Vector::Constant(1, 1.0);
  double sigma = 1.0;  // gaussian
  // Zero output-layer weights: with zero biases every output pre-activation
  // starts at 0, right of the gelu minimum, so no output unit starts dead.
  bool zero_last_layer = false;

  // [-0.2, 2.5] x [0, 2.5], the region shown for the two-neuron example.
  static InitScheme two_neuron_box();
  void validate() const;
};

// uniform_box: independent uniforms per coordinate. gaussian: N(0, sigma^2)
// for every parameter. he: weights N(0, 2 / fan_in), biases zero.
ParamVector draw_init(const Architecture& arch, const InitScheme& scheme, Rng& rng);

enum class OptimizerKind { gd, sgd };

struct Optimizer {
  OptimizerKind kind = OptimizerKind::gd;
  int batch_size = 0;  // sgd only
};

struct SweepSpec {
  std::vector<double> eta_grid;
  int n_inits = 100;
  InitScheme init = InitScheme::two_neuron_box();
  std::uint64_t seed = 0;
  RunConfig run_cfg;
  Optimizer optimizer;
  int jobs = 1;
  // A converged run counts as trapped only if its final loss is at most this.
  // Plateaus where the gradient underflows pass the convergence test without
  // being minima.
  double max_final_loss = std::numeric_limits<double>::infinity();

  // Checks everything except run_cfg.eta, which the grid overrides.
  void validate() const;
};

// Strictly increasing grid of `steps` points from lo to hi, linear or
// geometric.
std::vector<double> make_grid(double lo, double hi, int steps, bool log_spaced);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// 95% Wilson score interval for `successes` out of `total`.
Interval wilson_interval(int successes, int total);

struct TrapRegionEstimate {
  double eta = 0.0;
  int converged = 0;  // converged within max_final_loss
  int total = 0;
  double ratio = 0.0;
  Interval wilson;
  std::array<int, 4> verdicts{};  // indexed by Verdict
};

// Run i of the grid point k starts from substream(seed, {k, i}), so every
// estimate is independent of jobs and of the rest of the grid.
std::vector<TrapRegionEstimate> trap_region_sweep(const Problem& problem, const SweepSpec& spec);

// Length of {xy = 1, x^2 + y^2 <= 2 / eta} over both branches.
double mws_arclength_2neuron(double eta);

struct MwsPoint {
  double eta = 0.0;
  double length = 0.0;
  double normalized = 0.0;  // length / length at eta_grid.front()
};

std::vector<MwsPoint> normalized_mws_curve(const std::vector<double>& eta_grid);

struct GridSpec {
  std::vector<int> depths;  // number of weight layers
  int width = 8;
  Activation activation = Activation::gelu;
  LossKind loss_kind = LossKind::mse;
  bool use_bias = true;
  // Lifts the desk-scale limits (inputs <= 64, hidden width <= 16).
  bool allow_large = false;

  void validate(const DataBatch& data) const;
};

// Desk-scale grid defaults: two whitened Gaussian blobs, 8 samples in R^8;
// runs of up to 2e5 iterations with grad_tol 1e-3 and step_tol 1e-4; he init
// with a zero last layer, 50 inits per cell, log grid 0.002..10 of 7 points,
// and final loss <= 1e-4 for a trapped run.
SyntheticSpec desk_classification_data(std::uint64_t seed);
RunConfig desk_grid_run_config();
SweepSpec desk_grid_sweep(std::uint64_t seed, int jobs = 1);

Architecture grid_architecture(const GridSpec& grid, int depth, const DataBatch& data);

// Row r holds the sweep for grid.depths[r]; each row uses its own seed
// derived from (spec.seed, r).
std::vector<std::vector<TrapRegionEstimate>> depth_convergence_grid(const GridSpec& grid, const DataBatch& data,
                                                                    const SweepSpec& spec);

enum class FigureId { fig3, fig4, fig2, conv, exp };
std::string to_string(FigureId f);
FigureId parse_figure_id(std::string_view name);

struct ReproduceOptions {
  std::uint64_t seed = 0;
  int jobs = 1;
};

// Writes the CSV datasets for one figure plus manifest.json into out_dir and
// returns the manifest.
nlohmann::json reproduce_figure(FigureId figure, const std::filesystem::path& out_dir,
                                const ReproduceOptions& opts = {});

nlohmann::json to_json(const Architecture& arch);
nlohmann::json to_json(const RunConfig& cfg);
nlohmann::json to_json(const InitScheme& scheme);
nlohmann::json to_json(const SweepSpec& spec);
nlohmann::json to_json(const SyntheticSpec& spec);

Table trap_table(const std::vector<TrapRegionEstimate>& estimates);

}  // namespace gdstab
