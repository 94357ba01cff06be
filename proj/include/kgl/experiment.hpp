// Config-driven experiment harness: dataset generation, model fitting,
// metric sweeps over noise level / missing rate / observation count, and
// hyperparameter grid search with aggregate reporting. All outputs are
// deterministic functions of the config and base seed; repetition seeds are
// base_seed + repetition index.

#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "kgl/datagen.hpp"
#include "kgl/errors.hpp"
#include "kgl/graph.hpp"
#include "kgl/io.hpp"
#include "kgl/metrics.hpp"
#include "kgl/solvers.hpp"

namespace kgl {

// ---------------------------------------------------------------------------
// Logging (level from the KGL_LOG environment variable: quiet|info|debug)
// ---------------------------------------------------------------------------

inline int log_level() {
  static const int level = [] {
    const char* env = std::getenv("KGL_LOG");
    if (env == nullptr) return 1;
    const std::string s(env);
    if (s == "quiet") return 0;
    if (s == "debug") return 2;
    return 1;
  }();
  return level;
}

inline void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[kgl] " << msg << '\n';
}

inline void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::cerr << "[kgl:debug] " << msg << '\n';
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

enum class ModelKind { KGL, KGL_N, KGL_O, KGL_AGNOSTIC, GL, GL_2STEP };

inline std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::KGL: return "KGL";
    case ModelKind::KGL_N: return "KGL-N";
    case ModelKind::KGL_O: return "KGL-O";
    case ModelKind::KGL_AGNOSTIC: return "KGL-Agnostic";
    case ModelKind::GL: return "GL";
    case ModelKind::GL_2STEP: return "GL-2step";
  }
  return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "KGL") return ModelKind::KGL;
  if (s == "KGL-N") return ModelKind::KGL_N;
  if (s == "KGL-O") return ModelKind::KGL_O;
  if (s == "KGL-Agnostic") return ModelKind::KGL_AGNOSTIC;
  if (s == "GL") return ModelKind::GL;
  if (s == "GL-2step") return ModelKind::GL_2STEP;
  throw InvalidConfig("unknown model: " + s);
}

/// Hyperparameters the model actually reads; grid enumeration keeps the
/// irrelevant ones pinned so cells are not duplicated.
inline bool uses_lambda(ModelKind kind) {
  return kind != ModelKind::GL && kind != ModelKind::GL_2STEP;
}
inline bool uses_rho(ModelKind kind) { return kind != ModelKind::GL; }

struct HyperGrid {
  std::vector<double> lambdas{1e-2};
  std::vector<double> rhos{1e-2};
  std::vector<double> psis{1e-5};
};

inline std::vector<double> decade_grid() {
  return {1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1};
}

struct ModelSpec {
  ModelKind kind = ModelKind::KGL;
  HyperGrid grid;

  /// Cells enumerated with psi, rho, lambda ascending, so a scan that keeps
  /// the first strict maximum of mean APS breaks ties toward smaller psi,
  /// then rho, then lambda.
  std::vector<Hyperparams> cells(const Hyperparams& base) const {
    std::vector<Hyperparams> out;
    std::vector<double> ls =
        uses_lambda(kind) ? grid.lambdas : std::vector<double>{base.lambda};
    std::vector<double> rs =
        uses_rho(kind) ? grid.rhos : std::vector<double>{base.rho};
    std::vector<double> ps = grid.psis;
    std::sort(ls.begin(), ls.end());
    std::sort(rs.begin(), rs.end());
    std::sort(ps.begin(), ps.end());
    for (double psi : ps) {
      for (double rho : rs) {
        for (double lambda : ls) {
          Hyperparams hp = base;
          hp.lambda = lambda;
          hp.rho = rho;
          hp.psi = psi;
          out.push_back(hp);
        }
      }
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct DataConfig {
  std::vector<int> sizes{100};            // observation counts (size axis)
  bool dependent = false;
  std::vector<double> noise_vars{0.01};   // sigma_eps^2 (noise axis)
  std::vector<double> missing_rates{0.0}; // r (missing axis)
  double alpha = 1.0;
};

struct ExperimentConfig {
  GraphModel graph_model;
  int m = 20;
  DataConfig data;
  std::vector<ModelSpec> models;
  int repetitions = 10;
  std::uint64_t base_seed = 1;
  std::string out = "results";
  int jobs = 0;  // 0 = hardware concurrency
  bool record_timings = false;
  Hyperparams solver;  // solver tolerances shared by every fit

  void validate() const {
    graph_model.validate();
    if (m < 3) throw InvalidConfig("config: m must be >= 3");
    if (repetitions < 1) throw InvalidConfig("config: repetitions must be >= 1");
    if (models.empty()) throw InvalidConfig("config: no models listed");
    auto check_list = [](const auto& v, const std::string& name) {
      if (v.empty()) throw InvalidConfig("config: empty sweep list " + name);
      for (std::size_t i = 1; i < v.size(); ++i) {
        if (!(v[i] > v[i - 1])) {
          throw InvalidConfig("config: sweep list " + name +
                              " must be strictly increasing");
        }
      }
    };
    check_list(data.sizes, "n");
    check_list(data.noise_vars, "noise_var");
    check_list(data.missing_rates, "missing_rate");
    if (data.missing_rates.front() < 0.0 || data.missing_rates.back() >= 1.0) {
      throw InvalidConfig("config: missing rates must lie in [0,1)");
    }
    if (data.noise_vars.front() < 0.0) {
      throw InvalidConfig("config: noise variances must be >= 0");
    }
  }
};

namespace detail {

inline std::vector<double> scalar_or_list(const nlohmann::json& j,
                                          const std::string& key,
                                          std::vector<double> fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (v.is_array()) return v.get<std::vector<double>>();
  return {v.get<double>()};
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  ExperimentConfig cfg;
  const auto& g = j.at("graph");
  cfg.graph_model.kind = graph_kind_from_string(g.at("kind").get<std::string>());
  cfg.m = g.at("m").get<int>();
  cfg.graph_model.target_density = g.value("target_density", 0.3);
  cfg.graph_model.sbm_blocks = g.value("sbm_blocks", 2);
  cfg.graph_model.sbm_in_out_ratio = g.value("sbm_in_out_ratio", 4.0);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    auto sizes = detail::scalar_or_list(d, "n", {100});
    cfg.data.sizes.clear();
    for (double v : sizes) cfg.data.sizes.push_back(static_cast<int>(v));
    cfg.data.dependent = d.value("dependent", false);
    cfg.data.noise_vars = detail::scalar_or_list(d, "noise_var", {0.01});
    cfg.data.missing_rates = detail::scalar_or_list(d, "missing_rate", {0.0});
    cfg.data.alpha = d.value("alpha", 1.0);
  }
  for (const auto& mj : j.at("models")) {
    ModelSpec spec;
    spec.kind = model_kind_from_string(mj.at("name").get<std::string>());
    spec.grid.lambdas = detail::scalar_or_list(mj, "lambda", decade_grid());
    spec.grid.rhos = detail::scalar_or_list(mj, "rho", decade_grid());
    spec.grid.psis = detail::scalar_or_list(mj, "psi", decade_grid());
    cfg.models.push_back(std::move(spec));
  }
  cfg.repetitions = j.value("repetitions", 10);
  cfg.base_seed = j.value("base_seed", std::uint64_t{1});
  cfg.out = j.value("out", std::string("results"));
  cfg.jobs = j.value("jobs", 0);
  cfg.record_timings = j.value("record_timings", false);
  if (j.contains("solver")) {
    const auto& s = j.at("solver");
    cfg.solver.tol = s.value("tol", cfg.solver.tol);
    cfg.solver.max_outer = s.value("max_outer", cfg.solver.max_outer);
    cfg.solver.qp_tol = s.value("qp_tol", cfg.solver.qp_tol);
    cfg.solver.qp_max_iter = s.value("qp_max_iter", cfg.solver.qp_max_iter);
    cfg.solver.cg_tol = s.value("cg_tol", cfg.solver.cg_tol);
    cfg.solver.cg_max_iter = s.value("cg_max_iter", cfg.solver.cg_max_iter);
    cfg.solver.gamma = s.value("gamma", cfg.solver.gamma);
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return parse_config(nlohmann::json::parse(read_file(path)));
}

// ---------------------------------------------------------------------------
// Seeds
// ---------------------------------------------------------------------------

/// Derive independent streams from the repetition seed (base_seed + index).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Fresh ground truth and data for one repetition.
inline Dataset make_dataset(const ExperimentConfig& cfg, int n,
                            double noise_var, double missing_rate,
                            bool force_mask, int repetition) {
  const std::uint64_t rep_seed =
      cfg.base_seed + static_cast<std::uint64_t>(repetition);
  Graph truth =
      generate(cfg.graph_model, cfg.m, mix_seed(rep_seed, 0));
  Dataset ds = synthesize(truth, n, cfg.data.dependent, noise_var,
                          cfg.data.alpha, mix_seed(rep_seed, 1));
  if (missing_rate > 0.0 || force_mask) {
    ds = apply_mask(std::move(ds), missing_rate, mix_seed(rep_seed, 2));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Result rows
// ---------------------------------------------------------------------------

struct ResultRow {
  std::string model;
  std::string graph_kind;
  int m = 0;
  int n = 0;
  double noise_var = 0.0;
  double missing_rate = 0.0;
  double lambda = 0.0;
  double rho = 0.0;
  double psi = 0.0;
  int repetition = 0;
  std::optional<double> aps;
  std::optional<double> sse_g;
  std::optional<double> mse_train;
  std::optional<double> mse_oos;
  int iterations = 0;
  std::optional<double> wall_time_ms;
  std::string error;
};

inline std::string result_csv_header() {
  return "model,graph_kind,m,n,noise_var,missing_rate,lambda,rho,psi,"
         "repetition,aps,sse_g,mse_train,mse_oos,iterations,wall_time_ms,"
         "error";
}

inline std::string to_csv(const ResultRow& r) {
  auto opt = [](const std::optional<double>& v) {
    return v ? format_number(*v) : std::string();
  };
  std::string out;
  out += r.model + ',' + r.graph_kind + ',';
  out += std::to_string(r.m) + ',' + std::to_string(r.n) + ',';
  out += format_number(r.noise_var) + ',' + format_number(r.missing_rate) + ',';
  out += format_number(r.lambda) + ',' + format_number(r.rho) + ',' +
         format_number(r.psi) + ',';
  out += std::to_string(r.repetition) + ',';
  out += opt(r.aps) + ',' + opt(r.sse_g) + ',' + opt(r.mse_train) + ',' +
         opt(r.mse_oos) + ',';
  out += std::to_string(r.iterations) + ',' + opt(r.wall_time_ms) + ',';
  out += r.error;
  return out;
}

// ---------------------------------------------------------------------------
// Fitting one model on one dataset
// ---------------------------------------------------------------------------

struct ModelOutcome {
  std::optional<Graph> graph;
  std::optional<MatrixXd> y_hat;
  int iterations = 0;
  double wall_time_ms = 0.0;
};

inline ModelOutcome run_model(ModelKind kind, const Hyperparams& hp,
                              const Dataset& ds) {
  ModelOutcome out;
  detail::Stopwatch watch;
  switch (kind) {
    case ModelKind::KGL:
    case ModelKind::KGL_N:
    case ModelKind::KGL_O: {
      const Variant variant = kind == ModelKind::KGL   ? Variant::KGL
                              : kind == ModelKind::KGL_N ? Variant::KGL_N
                                                         : Variant::KGL_O;
      FitResult fr = kgl_fit(ds, hp, variant);
      switch (variant) {
        case Variant::KGL:
          out.y_hat = predict(fr.coefficients, ds.k_x.gram(), ds.k_z.gram());
          break;
        case Variant::KGL_N:
          out.y_hat = fr.coefficients * ds.k_x.gram();
          break;
        case Variant::KGL_O:
          out.y_hat = ds.k_z.gram() * fr.coefficients;
          break;
      }
      out.graph = std::move(fr.graph);
      out.iterations = fr.iterations;
      break;
    }
    case ModelKind::KGL_AGNOSTIC: {
      FitResult fr = kgl_agnostic_fit(ds, hp);
      out.y_hat = ds.k_z.gram() * fr.coefficients;
      out.graph = std::move(fr.graph);
      out.iterations = fr.iterations;
      break;
    }
    case ModelKind::GL: {
      out.graph = gl_fit(ds.masked_y(), hp.psi, qp_options(hp));
      out.iterations = 1;
      break;
    }
    case ModelKind::GL_2STEP: {
      TwoStepResult r = gl_2step_fit(ds.masked_y(), hp.rho, hp.psi, hp.tol,
                                     hp.max_outer, qp_options(hp));
      out.graph = std::move(r.graph);
      out.y_hat = std::move(r.y_hat);
      out.iterations = r.iterations;
      break;
    }
  }
  out.wall_time_ms = watch.ms();
  return out;
}

inline EvalReport evaluate_outcome(const Dataset& ds,
                                   const ModelOutcome& outcome) {
  EvalReport report;
  if (!outcome.graph || !ds.truth) return report;
  try {
    report.aps = average_precision(*ds.truth, *outcome.graph);
  } catch (const UndefinedMetric&) {
  }
  try {
    report.sse_g = sse_graph(*ds.truth, *outcome.graph);
  } catch (const DivisionByZero&) {
  }
  if (outcome.y_hat) {
    const MatrixXd ones = MatrixXd::Ones(ds.n(), ds.m());
    const MatrixXd& mask = ds.mask ? *ds.mask : ones;
    try {
      report.mse_train = mse_training(ds.y, *outcome.y_hat, mask);
    } catch (const UndefinedMetric&) {
    }
    if (ds.mask) {
      try {
        report.mse_oos = mse_out_of_sample(ds.y, *outcome.y_hat, mask);
      } catch (const UndefinedMetric&) {
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Parallel execution
// ---------------------------------------------------------------------------

template <typename Body>
inline void parallel_for(int jobs, std::int64_t count, Body&& body) {
  if (jobs <= 0) {
    jobs = static_cast<int>(std::thread::hardware_concurrency());
    if (jobs <= 0) jobs = 1;
  }
  jobs = static_cast<int>(
      std::min<std::int64_t>(jobs, std::max<std::int64_t>(count, 1)));
  if (jobs == 1) {
    for (std::int64_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::int64_t> next{0};
  std::vector<std::thread> workers;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  workers.reserve(static_cast<std::size_t>(jobs));
  for (int t = 0; t < jobs; ++t) {
    workers.emplace_back([&] {
      while (true) {
        const std::int64_t i = next.fetch_add(1);
        if (i >= count) break;
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Percentiles
// ---------------------------------------------------------------------------

/// Percentile with linear interpolation between order statistics.
inline double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw InvalidInput("percentile: empty sample");
  std::sort(values.begin(), values.end());
  const double h = (p / 100.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(h);
  if (lo + 1 >= values.size()) return values.back();
  const double frac = h - static_cast<double>(lo);
  return values[lo] + (values[lo + 1] - values[lo]) * frac;
}

inline double mean(const std::vector<double>& values) {
  if (values.empty()) throw InvalidInput("mean: empty sample");
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

enum class SweepAxis { Noise, Missing, Size };

inline SweepAxis axis_from_string(const std::string& s) {
  if (s == "noise") return SweepAxis::Noise;
  if (s == "missing") return SweepAxis::Missing;
  if (s == "size") return SweepAxis::Size;
  throw InvalidConfig("unknown sweep axis: " + s);
}

inline std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::Noise: return "noise";
    case SweepAxis::Missing: return "missing";
    case SweepAxis::Size: return "size";
  }
  return "?";
}

struct SweepOutcome {
  std::vector<ResultRow> rows;
  bool all_ok = true;
};

/// Pinned hyperparameters for a sweep: each model must name exactly one cell.
inline Hyperparams sweep_cell(const ModelSpec& spec, const Hyperparams& base) {
  const auto cells = spec.cells(base);
  if (cells.size() != 1) {
    throw InvalidConfig(
        "sweep: model " + to_string(spec.kind) +
        " must pin exactly one hyperparameter cell (run `grid` to choose)");
  }
  return cells.front();
}

inline SweepOutcome run_sweep(const ExperimentConfig& cfg, SweepAxis axis) {
  cfg.validate();
  std::vector<double> values;
  switch (axis) {
    case SweepAxis::Noise:
      values = cfg.data.noise_vars;
      break;
    case SweepAxis::Missing:
      values.assign(cfg.data.missing_rates.begin(),
                    cfg.data.missing_rates.end());
      break;
    case SweepAxis::Size:
      values.assign(cfg.data.sizes.begin(), cfg.data.sizes.end());
      break;
  }
  std::vector<Hyperparams> cells;
  cells.reserve(cfg.models.size());
  for (const auto& spec : cfg.models) {
    cells.push_back(sweep_cell(spec, cfg.solver));
  }

  const std::int64_t n_values = static_cast<std::int64_t>(values.size());
  const std::int64_t n_models = static_cast<std::int64_t>(cfg.models.size());
  const std::int64_t reps = cfg.repetitions;
  SweepOutcome outcome;
  outcome.rows.resize(static_cast<std::size_t>(n_values * n_models * reps));
  std::atomic<bool> any_failed{false};

  parallel_for(cfg.jobs, n_values * reps, [&](std::int64_t task) {
    const std::int64_t vi = task / reps;
    const int rep = static_cast<int>(task % reps);
    const double value = values[static_cast<std::size_t>(vi)];
    int n = cfg.data.sizes.front();
    double noise = cfg.data.noise_vars.front();
    double missing = cfg.data.missing_rates.front();
    switch (axis) {
      case SweepAxis::Noise: noise = value; break;
      case SweepAxis::Missing: missing = value; break;
      case SweepAxis::Size: n = static_cast<int>(value); break;
    }
    const bool force_mask = axis == SweepAxis::Missing;
    std::optional<Dataset> ds;
    std::string dataset_error;
    try {
      ds = make_dataset(cfg, n, noise, missing, force_mask, rep);
    } catch (const std::exception& e) {
      dataset_error = std::string("dataset generation failed: ") + e.what();
      any_failed = true;
    }
    for (std::int64_t mi = 0; mi < n_models; ++mi) {
      const ModelSpec& spec = cfg.models[static_cast<std::size_t>(mi)];
      const Hyperparams& hp = cells[static_cast<std::size_t>(mi)];
      ResultRow row;
      row.model = to_string(spec.kind);
      row.graph_kind = to_string(cfg.graph_model.kind);
      row.m = cfg.m;
      row.n = n;
      row.noise_var = noise;
      row.missing_rate = missing;
      row.lambda = hp.lambda;
      row.rho = hp.rho;
      row.psi = hp.psi;
      row.repetition = rep;
      if (!ds) {
        row.error = dataset_error;
      } else {
        try {
          const ModelOutcome fit = run_model(spec.kind, hp, *ds);
          const EvalReport report = evaluate_outcome(*ds, fit);
          row.aps = report.aps;
          row.sse_g = report.sse_g;
          row.mse_train = report.mse_train;
          row.mse_oos = report.mse_oos;
          row.iterations = fit.iterations;
          if (cfg.record_timings) row.wall_time_ms = fit.wall_time_ms;
        } catch (const std::exception& e) {
          row.error = e.what();
          any_failed = true;
        }
      }
      outcome.rows[static_cast<std::size_t>((vi * n_models + mi) * reps +
                                            rep)] = std::move(row);
    }
  });
  outcome.all_ok = !any_failed;
  return outcome;
}

// ---------------------------------------------------------------------------
// Summaries
// ---------------------------------------------------------------------------

inline std::string summary_csv_header() {
  return "axis,value,model,rows,aps_mean,aps_p5,aps_p95,sse_g_mean,sse_g_p5,"
         "sse_g_p95,mse_train_mean,mse_train_p5,mse_train_p95,mse_oos_mean,"
         "mse_oos_p5,mse_oos_p95";
}

inline std::vector<std::string> summarize_sweep(
    const std::vector<ResultRow>& rows, SweepAxis axis) {
  // Group by (value, model, cell) preserving first-seen order; the cell is
  // part of the key so a model listed twice with different pinned
  // hyperparameters is not merged.
  using Key = std::tuple<double, std::string, double, double, double>;
  std::vector<Key> keys;
  auto value_of = [&](const ResultRow& r) {
    switch (axis) {
      case SweepAxis::Noise: return r.noise_var;
      case SweepAxis::Missing: return r.missing_rate;
      case SweepAxis::Size: return static_cast<double>(r.n);
    }
    return 0.0;
  };
  auto key_of = [&](const ResultRow& r) {
    return Key{value_of(r), r.model, r.lambda, r.rho, r.psi};
  };
  std::vector<std::string> lines;
  for (const auto& row : rows) {
    const Key key = key_of(row);
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      keys.push_back(key);
    }
  }
  for (const auto& key : keys) {
    const auto& [value, model, lambda, rho, psi] = key;
    std::vector<double> aps, sse, train, oos;
    std::int64_t count = 0;
    for (const auto& row : rows) {
      if (key_of(row) != key || !row.error.empty()) {
        continue;
      }
      ++count;
      if (row.aps) aps.push_back(*row.aps);
      if (row.sse_g) sse.push_back(*row.sse_g);
      if (row.mse_train) train.push_back(*row.mse_train);
      if (row.mse_oos) oos.push_back(*row.mse_oos);
    }
    auto stats = [](const std::vector<double>& v) -> std::string {
      if (v.empty()) return ",,";
      return format_number(mean(v)) + ',' + format_number(percentile(v, 5)) +
             ',' + format_number(percentile(v, 95));
    };
    lines.push_back(to_string(axis) + ',' + format_number(value) + ',' +
                    model + ',' + std::to_string(count) + ',' + stats(aps) +
                    ',' + stats(sse) + ',' + stats(train) + ',' + stats(oos));
  }
  return lines;
}

inline void write_rows(const std::filesystem::path& path,
                       const std::string& header,
                       const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << header << '\n';
  for (const auto& line : lines) out << line << '\n';
}

/// Runs the sweep and writes results.csv + summary.csv; returns false when
/// any row recorded a failure.
inline bool cmd_sweep(const ExperimentConfig& cfg, SweepAxis axis,
                      const std::filesystem::path& out_dir) {
  log_info("sweep over " + to_string(axis) + " -> " + out_dir.string());
  const SweepOutcome outcome = run_sweep(cfg, axis);
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> lines;
  lines.reserve(outcome.rows.size());
  for (const auto& row : outcome.rows) lines.push_back(to_csv(row));
  write_rows(out_dir / "results.csv", result_csv_header(), lines);
  write_rows(out_dir / "summary.csv", summary_csv_header(),
             summarize_sweep(outcome.rows, axis));
  log_info("wrote " + std::to_string(outcome.rows.size()) + " rows");
  return outcome.all_ok;
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

struct GridBest {
  Hyperparams hp;
  double mean_aps = 0.0;
  std::optional<double> mean_mse_oos;
};

struct GridOutcome {
  std::vector<ResultRow> rows;
  std::map<std::string, GridBest> best;  // keyed by model name
  bool all_ok = true;
};

inline GridOutcome run_grid(const ExperimentConfig& cfg) {
  cfg.validate();
  const int n = cfg.data.sizes.front();
  const double noise = cfg.data.noise_vars.front();
  const double missing = cfg.data.missing_rates.front();

  // One dataset per repetition, shared across every model and grid cell.
  // Kernel eigendecompositions are computed eagerly here: the cache is
  // lazily filled otherwise, and shared datasets must not be mutated from
  // parallel workers.
  std::vector<Dataset> datasets;
  datasets.reserve(static_cast<std::size_t>(cfg.repetitions));
  for (int rep = 0; rep < cfg.repetitions; ++rep) {
    datasets.push_back(make_dataset(cfg, n, noise, missing, false, rep));
    datasets.back().k_x.eig();
    datasets.back().k_z.eig();
  }

  struct Task {
    std::size_t model_index;
    std::size_t cell_index;
    int rep;
  };
  std::vector<std::vector<Hyperparams>> model_cells;
  std::vector<Task> tasks;
  for (std::size_t mi = 0; mi < cfg.models.size(); ++mi) {
    model_cells.push_back(cfg.models[mi].cells(cfg.solver));
    for (std::size_t ci = 0; ci < model_cells[mi].size(); ++ci) {
      for (int rep = 0; rep < cfg.repetitions; ++rep) {
        tasks.push_back({mi, ci, rep});
      }
    }
  }

  GridOutcome outcome;
  outcome.rows.resize(tasks.size());
  std::atomic<bool> any_failed{false};
  parallel_for(cfg.jobs, static_cast<std::int64_t>(tasks.size()),
               [&](std::int64_t ti) {
    const Task& task = tasks[static_cast<std::size_t>(ti)];
    const ModelSpec& spec = cfg.models[task.model_index];
    const Hyperparams& hp = model_cells[task.model_index][task.cell_index];
    const Dataset& ds = datasets[static_cast<std::size_t>(task.rep)];
    ResultRow row;
    row.model = to_string(spec.kind);
    row.graph_kind = to_string(cfg.graph_model.kind);
    row.m = cfg.m;
    row.n = n;
    row.noise_var = noise;
    row.missing_rate = missing;
    row.lambda = hp.lambda;
    row.rho = hp.rho;
    row.psi = hp.psi;
    row.repetition = task.rep;
    try {
      const ModelOutcome fit = run_model(spec.kind, hp, ds);
      const EvalReport report = evaluate_outcome(ds, fit);
      row.aps = report.aps;
      row.sse_g = report.sse_g;
      row.mse_train = report.mse_train;
      row.mse_oos = report.mse_oos;
      row.iterations = fit.iterations;
      if (cfg.record_timings) row.wall_time_ms = fit.wall_time_ms;
    } catch (const std::exception& e) {
      row.error = e.what();
      any_failed = true;
    }
    outcome.rows[static_cast<std::size_t>(ti)] = std::move(row);
  });
  outcome.all_ok = !any_failed;

  // Best cell per model by mean APS; ties resolved toward smaller psi, then
  // rho, then lambda (the enumeration order of ModelSpec::cells).
  std::size_t offset = 0;
  for (std::size_t mi = 0; mi < cfg.models.size(); ++mi) {
    const auto& cells = model_cells[mi];
    GridBest best;
    bool have_best = false;
    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
      std::vector<double> aps, oos;
      for (int rep = 0; rep < cfg.repetitions; ++rep) {
        const ResultRow& row =
            outcome.rows[offset + ci * static_cast<std::size_t>(cfg.repetitions) +
                         static_cast<std::size_t>(rep)];
        if (!row.error.empty()) continue;
        if (row.aps) aps.push_back(*row.aps);
        if (row.mse_oos) oos.push_back(*row.mse_oos);
      }
      if (aps.empty()) continue;
      const double cell_aps = mean(aps);
      if (!have_best || cell_aps > best.mean_aps) {
        best.hp = cells[ci];
        best.mean_aps = cell_aps;
        best.mean_mse_oos =
            oos.empty() ? std::nullopt : std::optional<double>(mean(oos));
        have_best = true;
      }
    }
    if (have_best) {
      outcome.best[to_string(cfg.models[mi].kind)] = best;
    }
    offset += cells.size() * static_cast<std::size_t>(cfg.repetitions);
  }
  return outcome;
}

inline std::string heatmap_csv_header() {
  return "model,psi,lambda,rho,aps_mean,mse_oos_mean";
}

/// Heatmap-ready aggregation: mean APS and mean out-of-sample MSE per
/// (lambda, rho) within each psi slice, per model.
inline std::vector<std::string> summarize_grid(
    const std::vector<ResultRow>& rows) {
  std::vector<std::string> lines;
  std::vector<std::tuple<std::string, double, double, double>> keys;
  for (const auto& row : rows) {
    const std::tuple<std::string, double, double, double> key{
        row.model, row.psi, row.lambda, row.rho};
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      keys.push_back(key);
    }
  }
  for (const auto& [model, psi, lambda, rho] : keys) {
    std::vector<double> aps, oos;
    for (const auto& row : rows) {
      if (row.model != model || row.psi != psi || row.lambda != lambda ||
          row.rho != rho || !row.error.empty()) {
        continue;
      }
      if (row.aps) aps.push_back(*row.aps);
      if (row.mse_oos) oos.push_back(*row.mse_oos);
    }
    lines.push_back(model + ',' + format_number(psi) + ',' +
                    format_number(lambda) + ',' + format_number(rho) + ',' +
                    (aps.empty() ? std::string() : format_number(mean(aps))) +
                    ',' +
                    (oos.empty() ? std::string() : format_number(mean(oos))));
  }
  return lines;
}

/// Runs the grid search and writes grid.csv, heatmap.csv and best.json;
/// returns false when any row recorded a failure.
inline bool cmd_grid(const ExperimentConfig& cfg,
                     const std::filesystem::path& out_dir) {
  log_info("grid search -> " + out_dir.string());
  const GridOutcome outcome = run_grid(cfg);
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> lines;
  lines.reserve(outcome.rows.size());
  for (const auto& row : outcome.rows) lines.push_back(to_csv(row));
  write_rows(out_dir / "grid.csv", result_csv_header(), lines);
  write_rows(out_dir / "heatmap.csv", heatmap_csv_header(),
             summarize_grid(outcome.rows));
  nlohmann::json best;
  for (const auto& [model, cell] : outcome.best) {
    nlohmann::json b;
    b["lambda"] = cell.hp.lambda;
    b["rho"] = cell.hp.rho;
    b["psi"] = cell.hp.psi;
    b["aps_mean"] = cell.mean_aps;
    if (cell.mean_mse_oos) b["mse_oos_mean"] = *cell.mean_mse_oos;
    best[model] = b;
  }
  write_file(out_dir / "best.json", best.dump(2) + "\n");
  return outcome.all_ok;
}

// ---------------------------------------------------------------------------
// Single dataset generation and single fits
// ---------------------------------------------------------------------------

/// Writes the dataset for repetition 0 of the config (scalar settings).
inline void cmd_generate(const ExperimentConfig& cfg,
                         const std::filesystem::path& out_dir) {
  const Dataset ds =
      make_dataset(cfg, cfg.data.sizes.front(), cfg.data.noise_vars.front(),
                   cfg.data.missing_rates.front(), false, 0);
  save_dataset(ds, out_dir);
  log_info("dataset written to " + out_dir.string());
}

/// Fits one model on a stored dataset; writes fit.json, A.csv (when the
/// model estimates coefficients), weights.csv, and eval.json when ground
/// truth is available.
inline void cmd_fit(const std::filesystem::path& dataset_dir, ModelKind kind,
                    const Hyperparams& hp,
                    const std::filesystem::path& out_dir) {
  const Dataset ds = load_dataset(dataset_dir);
  std::filesystem::create_directories(out_dir);
  nlohmann::json info;
  info["model"] = to_string(kind);
  info["hyperparams"] = {
      {"lambda", hp.lambda}, {"rho", hp.rho}, {"psi", hp.psi}};

  ModelOutcome outcome;
  detail::Stopwatch watch;
  if (kind == ModelKind::GL) {
    outcome.graph = gl_fit(ds.masked_y(), hp.psi, qp_options(hp));
    outcome.iterations = 1;
    info["iterations"] = 1;
    info["converged"] = true;
  } else if (kind == ModelKind::GL_2STEP) {
    TwoStepResult r = gl_2step_fit(ds.masked_y(), hp.rho, hp.psi, hp.tol,
                                   hp.max_outer, qp_options(hp));
    write_csv(out_dir / "Y_hat.csv", r.y_hat);
    info["iterations"] = r.iterations;
    info["converged"] = r.converged;
    info["objective_trace"] = r.objective_trace;
    info["wall_time_ms"] = r.wall_time_ms;
    outcome.graph = std::move(r.graph);
    outcome.y_hat = std::move(r.y_hat);
    outcome.iterations = r.iterations;
  } else {
    FitResult fr = kind == ModelKind::KGL_AGNOSTIC
                       ? kgl_agnostic_fit(ds, hp)
                       : kgl_fit(ds, hp,
                                 kind == ModelKind::KGL     ? Variant::KGL
                                 : kind == ModelKind::KGL_N ? Variant::KGL_N
                                                            : Variant::KGL_O);
    write_csv(out_dir / "A.csv", fr.coefficients);
    info["variant"] = fr.variant;
    info["iterations"] = fr.iterations;
    info["converged"] = fr.converged;
    info["objective_trace"] = fr.objective_trace;
    info["wall_time_ms"] = fr.wall_time_ms;
    const std::vector<double> weights(
        fr.graph.weights().data(),
        fr.graph.weights().data() + fr.graph.weights().size());
    info["weights"] = weights;
    switch (kind) {
      case ModelKind::KGL:
        outcome.y_hat = predict(fr.coefficients, ds.k_x.gram(), ds.k_z.gram());
        break;
      case ModelKind::KGL_N:
        outcome.y_hat = fr.coefficients * ds.k_x.gram();
        break;
      case ModelKind::KGL_O:
      case ModelKind::KGL_AGNOSTIC:
        outcome.y_hat = ds.k_z.gram() * fr.coefficients;
        break;
      default:
        break;
    }
    outcome.graph = std::move(fr.graph);
    outcome.iterations = fr.iterations;
  }
  outcome.wall_time_ms = watch.ms();
  write_file(out_dir / "graph.json",
             graph_to_json(*outcome.graph).dump(2) + "\n");
  write_file(out_dir / "fit.json", info.dump(2) + "\n");

  if (ds.truth) {
    const EvalReport report = evaluate_outcome(ds, outcome);
    nlohmann::json ev;
    ev["aps"] = report.aps ? nlohmann::json(*report.aps) : nlohmann::json();
    ev["sse_g"] =
        report.sse_g ? nlohmann::json(*report.sse_g) : nlohmann::json();
    ev["mse_train"] = report.mse_train ? nlohmann::json(*report.mse_train)
                                       : nlohmann::json();
    ev["mse_oos"] =
        report.mse_oos ? nlohmann::json(*report.mse_oos) : nlohmann::json();
    write_file(out_dir / "eval.json", ev.dump(2) + "\n");
  }
}

}  // namespace kgl
