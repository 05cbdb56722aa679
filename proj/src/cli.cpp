#include "gdstab/cli.hpp"

#include "gdstab/data_io.hpp"
#include "gdstab/dynamics.hpp"
#include "gdstab/errors.hpp"
#include "gdstab/experiments.hpp"
#include "gdstab/landscape.hpp"
#include "gdstab/model.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <limits>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

namespace gdstab::cli {

using nlohmann::json;

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

namespace {

// Malformed flag values; reported with exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) parts.push_back(cur);
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

double to_double(const std::string& s, const std::string& flag) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size() && std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  throw UsageError(flag + ": '" + s + "' is not a finite number");
}

int to_int(const std::string& s, const std::string& flag) {
  try {
    std::size_t used = 0;
    const long v = std::stol(s, &used);
    if (used == s.size() && v >= INT32_MIN && v <= INT32_MAX) return static_cast<int>(v);
  } catch (const std::exception&) {
  }
  throw UsageError(flag + ": '" + s + "' is not an integer");
}

std::vector<int> parse_int_list(const std::string& s, const std::string& flag) {
  std::vector<int> out;
  for (const auto& p : split(s, ',')) out.push_back(to_int(p, flag));
  if (out.empty()) throw UsageError(flag + ": empty list");
  return out;
}

std::vector<double> parse_double_list(const std::string& s, const std::string& flag) {
  std::vector<double> out;
  for (const auto& p : split(s, ',')) out.push_back(to_double(p, flag));
  if (out.empty()) throw UsageError(flag + ": empty list");
  return out;
}

std::vector<double> parse_eta_grid(const std::string& s) {
  const auto parts = split(s, ':');
  if (parts.size() != 3 && parts.size() != 4) throw UsageError("--eta-grid: expected lo:hi:steps[:log]");
  bool log_spaced = false;
  if (parts.size() == 4) {
    if (parts[3] != "log" && parts[3] != "lin") throw UsageError("--eta-grid: fourth field must be 'log' or 'lin'");
    log_spaced = parts[3] == "log";
  }
  try {
    return make_grid(to_double(parts[0], "--eta-grid"), to_double(parts[1], "--eta-grid"),
                     to_int(parts[2], "--eta-grid"), log_spaced);
  } catch (const InvalidArgument& e) {
    throw UsageError(std::string("--eta-grid: ") + e.what());
  }
}

std::pair<double, double> parse_range(const std::string& s, const std::string& flag) {
  const auto parts = split(s, ':');
  if (parts.size() != 2) throw UsageError(flag + ": expected lo:hi");
  const double lo = to_double(parts[0], flag), hi = to_double(parts[1], flag);
  if (!(lo < hi)) throw UsageError(flag + ": lo must be < hi");
  return {lo, hi};
}

// Everything a subcommand may need, resolved from flags and then from the
// optional JSON config.
struct Settings {
  std::string example;
  std::vector<int> dims;
  Activation activation = Activation::identity;
  LossKind loss = LossKind::mse;
  bool bias = false;
  bool half = false;
  bool mean = false;

  std::string data_kind = "auto";
  int samples = 0;  // 0: max(10, 2 d0)
  double noise = 0.0;
  bool whiten = false;
  double separation = 2.0;
  std::string idx_images, idx_labels;
  std::vector<int> keep{0, 1};
  int max_per_class = 32;

  RunConfig run;
  double max_final_loss = std::numeric_limits<double>::infinity();
  std::vector<double> eta_grid{make_grid(0.1, 1.2, 12, false)};
  int n = 100;
  std::uint64_t seed = 0;
  int jobs = 1;
  InitScheme init;
  bool init_box_given = false;
  int batch = 0;
  std::vector<double> theta;
  GridSpec grid{{2, 4, 8}};
  double box_lo = -3.0, box_hi = 3.0;
  double det_tol = 1e-12;
};

// Raw flag strings; converted into Settings once parsing succeeded.
struct Flags {
  std::string example, arch, activation = "identity", loss = "mse";
  bool bias = false, half = false, mean = false;
  std::string data_kind = "auto";
  int samples = 0;
  double noise = 0.0;
  bool whiten = false;
  double separation = 2.0;
  std::string idx_images, idx_labels, keep = "0,1";
  int max_per_class = 32;
  double eta = 0.1;
  std::string eta_grid = "0.1:1.2:12";
  long budget = 100000;
  double grad_tol = 1e-8;
  double step_tol = 1e-10;
  double max_final_loss = std::numeric_limits<double>::infinity();
  std::string init = "box", box;
  double sigma = 1.0;
  bool zero_last_layer = false;
  int n = 100;
  std::uint64_t seed = 0;
  int jobs = 1;
  int batch = 0;
  std::string theta;
  std::string depths = "2,4,8";
  int width = 8;
  bool allow_large = false;
  double det_tol = 1e-12;
  std::string out, config;
};

// The grid command defaults to the desk-scale setup of desk_grid_sweep.
Flags grid_flags() {
  Flags f;
  const SyntheticSpec data = desk_classification_data(0);
  const SweepSpec sweep = desk_grid_sweep(0);
  f.arch = std::to_string(data.d0) + "," + std::to_string(data.dh);
  f.activation = "gelu";
  f.bias = true;
  f.data_kind = "gaussian_blobs";
  f.samples = data.n;
  f.whiten = data.whiten;
  f.separation = data.blob_separation;
  f.budget = sweep.run_cfg.max_iters;
  f.grad_tol = sweep.run_cfg.grad_tol;
  f.step_tol = sweep.run_cfg.step_tol;
  f.max_final_loss = sweep.max_final_loss;
  f.init = "he";
  f.zero_last_layer = sweep.init.zero_last_layer;
  f.eta_grid = "0.002:10:7:log";
  f.n = sweep.n_inits;
  return f;
}

Settings resolve(const Flags& f) {
  Settings s;
  s.example = f.example;
  if (!s.example.empty() && s.example != "two-neuron") throw UsageError("--example: only 'two-neuron' is available");
  if (!f.arch.empty()) s.dims = parse_int_list(f.arch, "--arch");
  try {
    s.activation = parse_activation(f.activation);
    s.loss = parse_loss_kind(f.loss);
    s.init.kind = parse_init_kind(f.init);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  s.bias = f.bias;
  s.half = f.half;
  s.mean = f.mean;
  s.data_kind = f.data_kind;
  s.samples = f.samples;
  s.noise = f.noise;
  s.whiten = f.whiten;
  s.separation = f.separation;
  s.idx_images = f.idx_images;
  s.idx_labels = f.idx_labels;
  s.keep = parse_int_list(f.keep, "--keep");
  s.max_per_class = f.max_per_class;
  s.run.eta = f.eta;
  s.run.max_iters = f.budget;
  s.run.grad_tol = f.grad_tol;
  s.run.step_tol = f.step_tol;
  s.max_final_loss = f.max_final_loss;
  s.eta_grid = parse_eta_grid(f.eta_grid);
  s.n = f.n;
  s.seed = f.seed;
  s.jobs = f.jobs;
  if (!f.box.empty()) {
    const auto [lo, hi] = parse_range(f.box, "--box");
    s.init.lo = Vector::Constant(1, lo);
    s.init.hi = Vector::Constant(1, hi);
    s.box_lo = lo;
    s.box_hi = hi;
    s.init_box_given = true;
  }
  s.init.sigma = f.sigma;
  s.init.zero_last_layer = f.zero_last_layer;
  s.batch = f.batch;
  if (!f.theta.empty()) s.theta = parse_double_list(f.theta, "--theta");
  s.grid.depths = parse_int_list(f.depths, "--depths");
  s.grid.width = f.width;
  s.grid.allow_large = f.allow_large;
  s.det_tol = f.det_tol;
  return s;
}

template <typename T>
T config_value(const json& j, const std::string& path) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(path, "has the wrong type");
  }
}

void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError(path.empty() ? key : path + "." + key, "unknown key");
  }
}

Vector config_vector(const json& j, const std::string& path) {
  const auto v = config_value<std::vector<double>>(j, path);
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

template <typename Parse>
auto config_enum(const json& j, const std::string& path, Parse parse) {
  try {
    return parse(config_value<std::string>(j, path));
  } catch (const InvalidArgument& e) {
    throw ConfigError(path, e.what());
  }
}

void apply_config(Settings& s, const json& c) {
  check_keys(c, "", {"example", "arch", "data", "seed", "jobs", "n", "eta_grid", "init", "run_cfg", "optimizer", "grid",
                     "theta", "box", "max_final_loss"});
  if (c.contains("example")) {
    s.example = config_value<std::string>(c["example"], "example");
    if (s.example != "two-neuron") throw ConfigError("example", "only 'two-neuron' is available");
  }
  if (c.contains("arch")) {
    const json& a = c["arch"];
    check_keys(a, "arch", {"layer_dims", "activation", "use_bias", "loss", "half", "mean"});
    if (a.contains("layer_dims")) s.dims = config_value<std::vector<int>>(a["layer_dims"], "arch.layer_dims");
    if (a.contains("activation")) s.activation = config_enum(a["activation"], "arch.activation", parse_activation);
    if (a.contains("loss")) s.loss = config_enum(a["loss"], "arch.loss", parse_loss_kind);
    if (a.contains("use_bias")) s.bias = config_value<bool>(a["use_bias"], "arch.use_bias");
    if (a.contains("half")) s.half = config_value<bool>(a["half"], "arch.half");
    if (a.contains("mean")) s.mean = config_value<bool>(a["mean"], "arch.mean");
  }
  if (c.contains("data")) {
    const json& d = c["data"];
    check_keys(d, "data",
               {"kind", "n", "noise_sigma", "whiten", "separation", "idx_images", "idx_labels", "keep", "max_per_class"});
    if (d.contains("kind")) s.data_kind = config_value<std::string>(d["kind"], "data.kind");
    if (d.contains("n")) s.samples = config_value<int>(d["n"], "data.n");
    if (d.contains("noise_sigma")) s.noise = config_value<double>(d["noise_sigma"], "data.noise_sigma");
    if (d.contains("whiten")) s.whiten = config_value<bool>(d["whiten"], "data.whiten");
    if (d.contains("separation")) s.separation = config_value<double>(d["separation"], "data.separation");
    if (d.contains("idx_images")) s.idx_images = config_value<std::string>(d["idx_images"], "data.idx_images");
    if (d.contains("idx_labels")) s.idx_labels = config_value<std::string>(d["idx_labels"], "data.idx_labels");
    if (d.contains("keep")) s.keep = config_value<std::vector<int>>(d["keep"], "data.keep");
    if (d.contains("max_per_class")) s.max_per_class = config_value<int>(d["max_per_class"], "data.max_per_class");
  }
  if (c.contains("seed")) s.seed = config_value<std::uint64_t>(c["seed"], "seed");
  if (c.contains("max_final_loss")) s.max_final_loss = config_value<double>(c["max_final_loss"], "max_final_loss");
  if (c.contains("jobs")) s.jobs = config_value<int>(c["jobs"], "jobs");
  if (c.contains("n")) s.n = config_value<int>(c["n"], "n");
  if (c.contains("eta_grid")) s.eta_grid = config_value<std::vector<double>>(c["eta_grid"], "eta_grid");
  if (c.contains("theta")) s.theta = config_value<std::vector<double>>(c["theta"], "theta");
  if (c.contains("box")) {
    const auto b = config_value<std::vector<double>>(c["box"], "box");
    if (b.size() != 2) throw ConfigError("box", "must be [lo, hi]");
    s.box_lo = b[0];
    s.box_hi = b[1];
  }
  if (c.contains("init")) {
    const json& i = c["init"];
    check_keys(i, "init", {"kind", "lo", "hi", "sigma", "zero_last_layer"});
    if (i.contains("kind")) s.init.kind = config_enum(i["kind"], "init.kind", parse_init_kind);
    if (i.contains("lo")) s.init.lo = config_vector(i["lo"], "init.lo"), s.init_box_given = true;
    if (i.contains("hi")) s.init.hi = config_vector(i["hi"], "init.hi"), s.init_box_given = true;
    if (i.contains("sigma")) s.init.sigma = config_value<double>(i["sigma"], "init.sigma");
    if (i.contains("zero_last_layer"))
      s.init.zero_last_layer = config_value<bool>(i["zero_last_layer"], "init.zero_last_layer");
  }
  if (c.contains("run_cfg")) {
    const json& r = c["run_cfg"];
    check_keys(r, "run_cfg", {"eta", "max_iters", "grad_tol", "step_tol", "diverge_norm", "diverge_loss", "record_every",
                              "cycle_window", "cycle_tol", "cycle_min_amplitude", "converge_window"});
    RunConfig& rc = s.run;
    auto set = [&](const char* key, auto& field) {
      if (r.contains(key)) field = config_value<std::decay_t<decltype(field)>>(r[key], std::string("run_cfg.") + key);
    };
    set("eta", rc.eta);
    set("max_iters", rc.max_iters);
    set("grad_tol", rc.grad_tol);
    set("step_tol", rc.step_tol);
    set("diverge_norm", rc.diverge_norm);
    set("diverge_loss", rc.diverge_loss);
    set("record_every", rc.record_every);
    set("cycle_window", rc.cycle_window);
    set("cycle_tol", rc.cycle_tol);
    set("cycle_min_amplitude", rc.cycle_min_amplitude);
    set("converge_window", rc.converge_window);
  }
  if (c.contains("optimizer")) {
    const json& o = c["optimizer"];
    check_keys(o, "optimizer", {"kind", "batch_size"});
    if (o.contains("kind")) {
      const auto kind = config_value<std::string>(o["kind"], "optimizer.kind");
      if (kind == "gd") s.batch = 0;
      else if (kind != "sgd") throw ConfigError("optimizer.kind", "must be 'gd' or 'sgd'");
    }
    if (o.contains("batch_size")) s.batch = config_value<int>(o["batch_size"], "optimizer.batch_size");
  }
  if (c.contains("grid")) {
    const json& g = c["grid"];
    check_keys(g, "grid", {"depths", "width", "allow_large"});
    if (g.contains("depths")) s.grid.depths = config_value<std::vector<int>>(g["depths"], "grid.depths");
    if (g.contains("width")) s.grid.width = config_value<int>(g["width"], "grid.width");
    if (g.contains("allow_large")) s.grid.allow_large = config_value<bool>(g["allow_large"], "grid.allow_large");
  }
}

json load_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("<root>", std::string("not valid JSON: ") + e.what());
  }
}

struct Built {
  Problem problem;
  json data;
};

Built build_problem(const Settings& s) {
  if (s.example == "two-neuron") {
    if (!s.dims.empty()) throw ConfigError("arch", "--example and --arch are mutually exclusive");
    return {two_neuron_problem(), {{"kind", "scalar_pair"}, {"x", 1.0}, {"y", 1.0}}};
  }
  if (s.dims.empty()) throw ConfigError("arch", "pass --arch d0,...,dh or --example two-neuron");
  Built b;
  b.problem.arch.layer_dims = s.dims;
  b.problem.arch.activation = s.activation;
  b.problem.arch.loss_kind = s.loss;
  b.problem.arch.use_bias = s.bias;
  b.problem.loss = {s.half, s.mean};
  try {
    b.problem.arch.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("arch", e.what());
  }
  const Architecture& arch = b.problem.arch;

  if (!s.idx_images.empty() || !s.idx_labels.empty()) {
    if (s.idx_images.empty() || s.idx_labels.empty())
      throw ConfigError("data", "--idx-images and --idx-labels must be given together");
    b.problem.data = load_idx(s.idx_images, s.idx_labels, s.keep, s.max_per_class);
    b.data = {{"kind", "idx"},
              {"images", s.idx_images},
              {"labels", s.idx_labels},
              {"keep", s.keep},
              {"max_per_class", s.max_per_class},
              {"pixel_scale", "1/255"},
              {"n", b.problem.data.n()}};
  } else {
    SyntheticSpec spec;
    spec.seed = s.seed;
    spec.d0 = arch.input_dim();
    spec.dh = arch.output_dim();
    spec.n = s.samples > 0 ? s.samples : std::max(10, 2 * spec.d0);
    spec.noise_sigma = s.noise;
    std::string kind = s.data_kind;
    if (kind == "auto") kind = arch.activation == Activation::identity && arch.loss_kind == LossKind::mse ? "linear_teacher" : "gaussian_blobs";
    try {
      spec.kind = parse_synthetic_kind(kind);
    } catch (const InvalidArgument& e) {
      throw ConfigError("data.kind", e.what());
    }
    if (spec.kind == SyntheticKind::scalar_pair)
      throw ConfigError("data.kind", "scalar_pair data is only used by --example two-neuron");
    if (spec.kind == SyntheticKind::linear_teacher) {
      const FillingClass fc = classify_architecture(arch);
      spec.rank = std::min(fc.rank_budget, std::min(spec.d0, spec.dh));
      spec.whiten = !fc.filling;
    } else {
      spec.classes = spec.dh;
      spec.whiten = s.whiten;
      spec.blob_separation = s.separation;
    }
    b.problem.data = make_synthetic(spec);
    b.data = to_json(spec);
  }
  b.problem.validate();
  return b;
}

InitScheme init_for(const Settings& s, const Problem& p) {
  InitScheme init = s.init;
  if (init.kind == InitKind::uniform_box && !s.init_box_given) {
    if (s.example == "two-neuron") {
      init = InitScheme::two_neuron_box();
    } else {
      init.lo = Vector::Constant(1, -1.0);
      init.hi = Vector::Constant(1, 1.0);
    }
  }
  (void)p;
  return init;
}

SweepSpec sweep_for(const Settings& s, const Problem& p, std::vector<double> grid) {
  SweepSpec spec;
  spec.eta_grid = std::move(grid);
  spec.n_inits = s.n;
  spec.init = init_for(s, p);
  spec.seed = s.seed;
  spec.run_cfg = s.run;
  spec.jobs = s.jobs;
  spec.max_final_loss = s.max_final_loss;
  if (s.batch > 0) spec.optimizer = {OptimizerKind::sgd, s.batch};
  return spec;
}

ParamVector theta_from(const Settings& s, const Problem& p) {
  if (static_cast<int>(s.theta.size()) != p.arch.param_count())
    throw ConfigError("theta", "has " + std::to_string(s.theta.size()) + " entries, model has " +
                                   std::to_string(p.arch.param_count()) + " parameters");
  return Eigen::Map<const ParamVector>(s.theta.data(), static_cast<Eigen::Index>(s.theta.size()));
}

std::vector<double> as_vector(const ParamVector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

class Session {
 public:
  Session(std::string command, std::vector<std::string> args, std::filesystem::path out_dir, std::ostream& out)
      : command_(std::move(command)), args_(std::move(args)), out_dir_(std::move(out_dir)), out_(out) {}

  std::ostream& out() { return out_; }

  void csv(const std::string& name, const Table& t) {
    write_csv(t, out_dir_ / name);
    outputs_.push_back(name);
  }

  void finish(const Settings& s, const json& arch, const json& data, const json& run_cfg, json extra = json::object()) {
    json m{{"schema_version", kSchemaVersion},
           {"tool_version", kToolVersion},
           {"command", command_},
           {"args", args_},
           {"seed", s.seed},
           {"arch", arch},
           {"data", data},
           {"run_cfg", run_cfg},
           {"outputs", outputs_}};
    for (auto& [k, v] : extra.items()) m[k] = v;
    std::filesystem::create_directories(out_dir_);
    write_manifest(m, out_dir_ / "manifest.json");
  }

 private:
  std::string command_;
  std::vector<std::string> args_;
  std::filesystem::path out_dir_;
  std::ostream& out_;
  std::vector<std::string> outputs_;
};

void cmd_spectrum(const Settings& s, Session& io) {
  const Built b = build_problem(s);
  ParamVector theta;
  std::string where;
  if (!s.theta.empty()) {
    theta = theta_from(s, b.problem);
    where = "theta";
  } else {
    if (!b.problem.arch.is_linear())
      throw ConfigError("theta", "non-linear models need an explicit --theta point");
    Rng rng = substream(s.seed, {0});
    theta = sample_minimum(b.problem, rng).theta;
    where = "sampled_minimum";
  }
  const SpectrumReport r = spectrum_at(b.problem, theta);
  io.out() << "point " << where << "\n"
           << "lambda_max " << num(r.lambda_max) << "\n"
           << "lambda_min_nonzero " << (r.lambda_min_nonzero ? num(*r.lambda_min_nonzero) : "none") << "\n"
           << "n_positive " << r.n_positive << "\nn_zero " << r.n_zero << "\nn_negative " << r.n_negative << "\n"
           << "zero_threshold " << num(r.zero_threshold) << "\n";
  Table t;
  t.header = {"index", "eigenvalue"};
  for (Eigen::Index i = 0; i < r.eigenvalues.size(); ++i)
    t.rows.push_back({static_cast<long long>(i), r.eigenvalues[i]});
  io.csv("spectrum.csv", t);
  io.finish(s, to_json(b.problem.arch), b.data, json::object(),
            {{"theta", as_vector(theta)},
             {"zero_threshold", r.zero_threshold},
             {"n_positive", r.n_positive},
             {"n_zero", r.n_zero},
             {"n_negative", r.n_negative}});
}

void cmd_trajectory(const Settings& s, Session& io) {
  const Built b = build_problem(s);
  Rng rng = substream(s.seed, {0});
  const ParamVector theta0 = s.theta.empty() ? draw_init(b.problem.arch, init_for(s, b.problem), rng)
                                             : theta_from(s, b.problem);
  RunConfig cfg = s.run;
  cfg.record_sharpness = true;
  const RunRecord rec =
      s.batch > 0 ? run_sgd(b.problem, theta0, cfg, s.batch, rng) : run_gd(b.problem, theta0, cfg);
  io.out() << "verdict " << to_string(rec.verdict) << "\n";
  if (rec.period) io.out() << "period " << *rec.period << "\n";
  io.out() << "iterations " << rec.iterations_used << "\n"
           << "final_loss " << num(rec.final_loss) << "\n"
           << "final_grad_norm " << num(rec.final_grad_norm) << "\n";
  Table t;
  t.header = {"iter", "loss", "grad_norm", "sharpness", "theta_norm"};
  for (const auto& smp : rec.samples)
    t.rows.push_back({static_cast<long long>(smp.iter), smp.loss, smp.grad_norm,
                      smp.sharpness ? *smp.sharpness : std::numeric_limits<double>::quiet_NaN(), smp.theta_norm});
  io.csv("trajectory.csv", t);
  json extra{{"theta0", as_vector(theta0)},
             {"init", to_json(init_for(s, b.problem))},
             {"verdict", to_string(rec.verdict)},
             {"iterations_used", rec.iterations_used},
             {"optimizer", s.batch > 0 ? "sgd" : "gd"}};
  if (s.batch > 0) extra["batch_size"] = s.batch;
  io.finish(s, to_json(b.problem.arch), b.data, to_json(cfg), extra);
}

void print_estimate(std::ostream& out, const TrapRegionEstimate& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "eta %.10g converged %d/%d ratio %.4f wilson [%.4f, %.4f]\n", e.eta, e.converged,
                e.total, e.ratio, e.wilson.lo, e.wilson.hi);
  out << buf;
}

void cmd_sweep(const Settings& s, Session& io, bool single_eta) {
  const Built b = build_problem(s);
  const SweepSpec spec = sweep_for(s, b.problem, single_eta ? std::vector<double>{s.run.eta} : s.eta_grid);
  const auto est = trap_region_sweep(b.problem, spec);
  for (const auto& e : est) print_estimate(io.out(), e);
  io.csv(single_eta ? "trap.csv" : "sweep.csv", trap_table(est));
  io.finish(s, to_json(b.problem.arch), b.data, to_json(spec.run_cfg), {{"sweep", to_json(spec)}});
}

void cmd_mws_length(const Settings& s, Session& io, bool grid_given) {
  Table t;
  t.header = {"eta", "length", "normalized"};
  if (grid_given) {
    for (const auto& p : normalized_mws_curve(s.eta_grid)) {
      io.out() << "eta " << num(p.eta) << " length " << num(p.length) << " normalized " << num(p.normalized) << "\n";
      t.rows.push_back({p.eta, p.length, p.normalized});
    }
  } else {
    const double len = mws_arclength_2neuron(s.run.eta);
    io.out() << "eta " << num(s.run.eta) << " length " << num(len) << "\n";
    t.rows.push_back({s.run.eta, len, std::numeric_limits<double>::quiet_NaN()});
  }
  io.csv("mws_length.csv", t);
  io.finish(s, to_json(two_neuron_problem().arch), {{"kind", "scalar_pair"}, {"x", 1.0}, {"y", 1.0}}, json::object(),
            {{"eta_grid", grid_given ? s.eta_grid : std::vector<double>{s.run.eta}}});
}

void cmd_eta_e(const Settings& s, Session& io, int samples) {
  const Built b = build_problem(s);
  if (samples < 1) throw ConfigError("n", "must be >= 1");
  const EtaEstimate est = eta_E_estimate(b.problem, samples, s.seed);
  io.out() << num(est.eta_E) << "\n";
  Table t;
  t.header = {"sample", "running_lambda_min_nonzero", "running_eta_E"};
  for (std::size_t k = 0; k < est.running_lambda.size(); ++k)
    t.rows.push_back({static_cast<long long>(k + 1), est.running_lambda[k], 2.0 / est.running_lambda[k]});
  io.csv("eta_e.csv", t);
  io.finish(s, to_json(b.problem.arch), b.data, json::object(),
            {{"eta_E", est.eta_E}, {"lambda_E", est.lambda_E}, {"n_samples", est.n_samples}});
}

void cmd_nonsing(const Settings& s, Session& io, int samples) {
  const Built b = build_problem(s);
  if (samples < 1) throw ConfigError("n", "must be >= 1");
  if (!(s.run.eta > 0.0)) throw ConfigError("run_cfg.eta", "must be > 0");
  const int dim = b.problem.arch.param_count();
  const NonsingularityReport r = nonsingularity_probe(b.problem, s.run.eta, samples, Box::cube(dim, s.box_lo, s.box_hi),
                                                      s.seed, s.det_tol, s.jobs);
  io.out() << "samples " << r.n_samples << "\nbelow_tol " << r.below_tol << "\nfraction_below_tol "
           << num(r.fraction_below_tol) << "\nmin_abs_det " << num(r.min_abs_det) << "\n";
  Table t;
  t.header = {"eta", "samples", "below_tol", "fraction_below_tol", "min_abs_det"};
  t.rows.push_back({s.run.eta, static_cast<long long>(r.n_samples), static_cast<long long>(r.below_tol),
                    r.fraction_below_tol, r.min_abs_det});
  io.csv("nonsing.csv", t);
  io.finish(s, to_json(b.problem.arch), b.data, json::object(),
            {{"eta", s.run.eta}, {"box", {s.box_lo, s.box_hi}}, {"det_tol", s.det_tol}});
}

void cmd_grid(const Settings& s, Session& io) {
  Settings local = s;
  // The grid builds its own architectures; --arch only fixes d0 and dh.
  if (local.dims.size() < 2) throw ConfigError("arch", "needs at least d0 and dh");
  local.dims = {local.dims.front(), local.dims.back()};
  local.bias = true;
  if (!s.example.empty()) throw ConfigError("example", "grid runs on synthetic or IDX data");

  const Built b = build_problem(local);
  GridSpec grid = s.grid;
  grid.activation = local.activation;
  grid.loss_kind = local.loss;
  grid.use_bias = true;
  const SweepSpec spec = sweep_for(local, b.problem, s.eta_grid);
  const auto rows = depth_convergence_grid(grid, b.problem.data, spec);
  Table t;
  t.header = {"depth", "eta", "converged", "total", "ratio", "wilson_lo", "wilson_hi"};
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (const auto& e : rows[r]) {
      io.out() << "depth " << grid.depths[r] << " ";
      print_estimate(io.out(), e);
      t.rows.push_back({static_cast<long long>(grid.depths[r]), e.eta, static_cast<long long>(e.converged),
                        static_cast<long long>(e.total), e.ratio, e.wilson.lo, e.wilson.hi});
    }
  io.csv("grid.csv", t);
  io.finish(s, to_json(grid_architecture(grid, grid.depths.front(), b.problem.data)), b.data, to_json(spec.run_cfg),
            {{"sweep", to_json(spec)}, {"depths", grid.depths}, {"width", grid.width}});
}

void validate_all(const Settings& s) {
  RunConfig rc = s.run;
  rc.validate();
  if (s.n < 1) throw ConfigError("n", "must be >= 1");
  if (s.jobs < 1) throw ConfigError("jobs", "must be >= 1");
  if (s.batch < 0) throw ConfigError("optimizer.batch_size", "must be >= 1");
  for (std::size_t i = 0; i < s.eta_grid.size(); ++i)
    if (!(s.eta_grid[i] > 0.0) || (i > 0 && !(s.eta_grid[i] > s.eta_grid[i - 1])))
      throw ConfigError("eta_grid[" + std::to_string(i) + "]", "grid must be positive and strictly increasing");
  if (s.eta_grid.empty()) throw ConfigError("eta_grid", "must not be empty");
  InitScheme init = s.init;
  if (init.kind == InitKind::uniform_box && !s.init_box_given) init = InitScheme::two_neuron_box();
  init.validate();
  if (!(s.box_lo < s.box_hi)) throw ConfigError("box", "lo must be < hi");
  for (std::size_t i = 0; i < s.grid.depths.size(); ++i)
    if (s.grid.depths[i] < 1) throw ConfigError("grid.depths[" + std::to_string(i) + "]", "must be >= 1");
  if (s.grid.width < 1) throw ConfigError("grid.width", "must be >= 1");
  if (s.max_per_class < 1) throw ConfigError("data.max_per_class", "must be >= 1");
  if (s.samples < 0) throw ConfigError("data.n", "must be >= 1");
  if (!(s.noise >= 0.0)) throw ConfigError("data.noise_sigma", "must be >= 0");
  if (!(s.separation >= 0.0)) throw ConfigError("data.separation", "must be >= 0");
  if (!(s.max_final_loss >= 0.0)) throw ConfigError("max_final_loss", "must be >= 0");
  if (!s.dims.empty()) {
    Architecture a{s.dims, s.activation, s.bias, s.loss};
    try {
      a.validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError("arch.layer_dims", e.what());
    }
  }
}

std::string suggestion(const std::string& word, const std::vector<std::string>& candidates) {
  std::string best;
  std::size_t best_d = std::string::npos;
  for (const auto& c : candidates) {
    const std::size_t d = edit_distance(word, c);
    if (d < best_d) best_d = d, best = c;
  }
  if (best.empty() || best_d > std::max<std::size_t>(2, word.size() / 3)) return {};
  return best;
}

std::vector<std::string> long_names(const CLI::App& app) {
  std::vector<std::string> names;
  for (const CLI::Option* o : app.get_options())
    for (const auto& n : o->get_lnames()) names.push_back("--" + n);
  return names;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gradient-descent stability experiments for deep networks", "gdstab"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", kToolVersion);

  Flags f, gf = grid_flags();
  int eta_e_samples = 20, nonsing_samples = 10000;
  std::string figure, config_path;

  auto model_flags = [&](CLI::App* sub, Flags& f) {
    sub->add_option("--example", f.example, "Built-in instance (two-neuron)")->check(CLI::IsMember({"two-neuron"}));
    sub->add_option("--arch", f.arch, "Layer widths d0,d1,...,dh");
    sub->add_option("--activation", f.activation, "identity|relu|gelu|tanh|sigmoid")
        ->check(CLI::IsMember({"identity", "relu", "gelu", "tanh", "sigmoid"}));
    sub->add_option("--loss", f.loss, "mse|softmax_cross_entropy")->check(CLI::IsMember({"mse", "softmax_cross_entropy"}));
    sub->add_flag("--bias", f.bias, "Add bias vectors");
    sub->add_flag("--half", f.half, "Scale the squared loss by 1/2");
    sub->add_flag("--mean", f.mean, "Average the loss over samples");
    sub->add_option("--data", f.data_kind, "auto|linear_teacher|gaussian_blobs")
        ->check(CLI::IsMember({"auto", "linear_teacher", "gaussian_blobs"}));
    sub->add_option("--samples", f.samples, "Synthetic sample count (0: max(10, 2 d0))")->check(CLI::NonNegativeNumber);
    sub->add_option("--noise", f.noise, "Label noise sigma for synthetic data")->check(CLI::NonNegativeNumber);
    sub->add_flag("--whiten", f.whiten, "Whiten synthetic blob inputs to identity covariance");
    sub->add_option("--separation", f.separation, "Scale of the synthetic blob centres")->check(CLI::NonNegativeNumber);
    sub->add_option("--idx-images", f.idx_images, "IDX image file");
    sub->add_option("--idx-labels", f.idx_labels, "IDX label file");
    sub->add_option("--keep", f.keep, "Labels kept from the IDX files");
    sub->add_option("--max-per-class", f.max_per_class, "Images kept per label")->check(CLI::PositiveNumber);
    sub->add_option("--seed", f.seed, "Seed for every stochastic component");
  };
  auto run_flags = [&](CLI::App* sub, Flags& f) {
    sub->add_option("--budget", f.budget, "Maximum GD iterations")->check(CLI::PositiveNumber);
    sub->add_option("--grad-tol", f.grad_tol, "Gradient-norm convergence tolerance")->check(CLI::PositiveNumber);
    sub->add_option("--step-tol", f.step_tol, "Step-length convergence tolerance")->check(CLI::PositiveNumber);
    sub->add_option("--max-final-loss", f.max_final_loss, "Largest final loss of a run counted as trapped")
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--init", f.init, "box|gauss|he")->check(CLI::IsMember({"box", "gauss", "he"}));
    sub->add_option("--box", f.box, "Uniform init bounds lo:hi (default: the two-neuron display box, else -1:1)");
    sub->add_option("--sigma", f.sigma, "Standard deviation for --init gauss")->check(CLI::PositiveNumber);
    sub->add_flag("--zero-last-layer", f.zero_last_layer, "Start with zero output-layer weights");
    sub->add_option("--batch", f.batch, "Minibatch size for SGD (0: full-batch GD)")->check(CLI::NonNegativeNumber);
  };
  auto out_flags = [&](CLI::App* sub, const std::string& name, Flags& f) {
    sub->add_option("--out", f.out, "Output directory for CSVs and manifest.json")
        ->default_str("gdstab-out/" + name);
    sub->add_option("--config", f.config, "JSON config; its values override flags");
  };
  auto positive_eta = [&](CLI::App* sub, Flags& f) {
    return sub->add_option("--eta", f.eta, "Step size")->check(CLI::PositiveNumber);
  };
  auto jobs_flag = [&](CLI::App* sub, Flags& f) {
    sub->add_option("--jobs", f.jobs, "Worker threads")->check(CLI::PositiveNumber);
  };

  std::map<std::string, CLI::App*> subs;
  auto add = [&](const std::string& name, const std::string& help) {
    CLI::App* s = app.add_subcommand(name, help);
    subs[name] = s;
    return s;
  };

  CLI::App* spectrum = add("spectrum", "Hessian spectrum at a point or at a sampled minimum");
  model_flags(spectrum, f);
  spectrum->add_option("--theta", f.theta, "Parameter vector (comma separated)");

  CLI::App* trajectory = add("trajectory", "Run GD or SGD from one initialization");
  model_flags(trajectory, f);
  run_flags(trajectory, f);
  positive_eta(trajectory, f);
  trajectory->add_option("--theta", f.theta, "Initial parameters (comma separated)");

  CLI::App* sweep = add("sweep", "Trap-region ratios over an eta grid");
  model_flags(sweep, f);
  run_flags(sweep, f);
  jobs_flag(sweep, f);
  sweep->add_option("--eta-grid", f.eta_grid, "lo:hi:steps[:log]");
  sweep->add_option("--n", f.n, "Initializations per eta")->check(CLI::PositiveNumber);

  CLI::App* trap = add("trap", "Trap-region ratio at one eta");
  model_flags(trap, f);
  run_flags(trap, f);
  jobs_flag(trap, f);
  positive_eta(trap, f);
  trap->add_option("--n", f.n, "Initializations")->check(CLI::PositiveNumber);

  CLI::App* mws = add("mws-length", "Arc length of the weakly stable minima of the two-neuron example");
  positive_eta(mws, f);
  CLI::Option* mws_grid = mws->add_option("--eta-grid", f.eta_grid, "lo:hi:steps[:log]; normalized to the first point");
  mws->add_option("--seed", f.seed, "Recorded in the manifest");

  CLI::App* eta_e = add("eta-e", "Estimate the critical step size eta_E");
  model_flags(eta_e, f);
  eta_e->add_option("--n", eta_e_samples, "Sampled minima")->check(CLI::PositiveNumber);

  CLI::App* nonsing = add("nonsing", "Probe det(I - eta H) over a uniform box");
  model_flags(nonsing, f);
  positive_eta(nonsing, f);
  jobs_flag(nonsing, f);
  nonsing->add_option("--n", nonsing_samples, "Samples")->check(CLI::PositiveNumber);
  nonsing->add_option("--box", f.box, "Sampling box lo:hi")->default_str("-3:3");
  nonsing->add_option("--det-tol", f.det_tol, "Threshold on |det|")->check(CLI::PositiveNumber);

  CLI::App* grid = add("grid", "Trap-region ratios over depth x eta for non-linear nets");
  model_flags(grid, gf);
  run_flags(grid, gf);
  jobs_flag(grid, gf);
  grid->add_option("--eta-grid", gf.eta_grid, "lo:hi:steps[:log]");
  grid->add_option("--n", gf.n, "Initializations per cell")->check(CLI::PositiveNumber);
  grid->add_option("--depths", gf.depths, "Weight-layer counts");
  grid->add_option("--width", gf.width, "Hidden width")->check(CLI::PositiveNumber);
  grid->add_flag("--allow-large", gf.allow_large, "Accept inputs > 64 or width > 16");

  CLI::App* reproduce = add("reproduce", "Write the datasets behind one figure");
  reproduce->add_option("figure", figure, "fig3|fig4|fig2|conv|exp")
      ->required()
      ->check(CLI::IsMember({"fig3", "fig4", "fig2", "conv", "exp"}));
  reproduce->add_option("--seed", f.seed, "Seed");
  jobs_flag(reproduce, f);

  CLI::App* validate = add("validate-config", "Check a JSON config and report the first invalid key");
  validate->add_option("file", config_path, "Config file")->required();

  for (auto& [name, sub] : subs)
    if (name != "validate-config") out_flags(sub, name, name == "grid" ? gf : f);

  const std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    std::vector<std::string> argv = reversed;
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    const auto chosen = app.get_subcommands();
    out << (chosen.empty() ? app.help() : chosen.front()->help());
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto chosen = app.get_subcommands();
    if (dynamic_cast<const CLI::ExtrasError*>(&e) != nullptr || dynamic_cast<const CLI::RequiredError*>(&e) != nullptr) {
      std::vector<std::string> candidates;
      if (chosen.empty())
        for (const auto& [name, _] : subs) candidates.push_back(name);
      else
        candidates = long_names(*chosen.front());
      for (const auto& a : args) {
        if (std::find(candidates.begin(), candidates.end(), a) != candidates.end()) continue;
        const std::string hint = suggestion(a.substr(0, a.find('=')), candidates);
        if (!hint.empty() && (a.rfind("--", 0) == 0 || chosen.empty())) {
          err << "did you mean '" << hint << "'?\n";
          break;
        }
      }
    }
    err << "run 'gdstab " << (chosen.empty() ? "" : chosen.front()->get_name() + " ") << "--help' for usage\n";
    return kExitUsage;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string command = chosen->get_name();
  const Flags& used = command == "grid" ? gf : f;
  try {
    if (command == "validate-config") {
      Settings s;
      apply_config(s, load_json(config_path));
      validate_all(s);
      if (!s.example.empty() || !s.dims.empty()) build_problem(s);
      out << "ok\n";
      return kExitOk;
    }

    Settings s;
    try {
      s = resolve(used);
    } catch (const UsageError& e) {
      err << "error: " << e.what() << "\n";
      return kExitUsage;
    }
    if (!used.config.empty()) apply_config(s, load_json(used.config));
    validate_all(s);

    const std::string out_dir = used.out.empty() ? "gdstab-out/" + command : used.out;
    Session io(command, args, out_dir, out);
    if (command == "spectrum") cmd_spectrum(s, io);
    else if (command == "trajectory") cmd_trajectory(s, io);
    else if (command == "sweep") cmd_sweep(s, io, false);
    else if (command == "trap") cmd_sweep(s, io, true);
    else if (command == "mws-length") cmd_mws_length(s, io, mws_grid->count() > 0);
    else if (command == "eta-e") cmd_eta_e(s, io, eta_e_samples);
    else if (command == "nonsing") cmd_nonsing(s, io, nonsing_samples);
    else if (command == "grid") cmd_grid(s, io);
    else if (command == "reproduce") {
      const json m = reproduce_figure(parse_figure_id(figure), out_dir, {s.seed, s.jobs});
      for (const auto& o : m["outputs"]) out << (std::filesystem::path(out_dir) / o.get<std::string>()).string() << "\n";
    }
    return kExitOk;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: invalid config at " << e.what() << "\n";
    return kExitDomain;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  }
}

}  // namespace gdstab::cli
