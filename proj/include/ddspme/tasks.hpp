#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddspme/approximation.hpp"
#include "ddspme/config.hpp"
#include "ddspme/csv.hpp"
#include "ddspme/error.hpp"
#include "ddspme/fixed_point.hpp"
#include "ddspme/integrator.hpp"
#include "ddspme/measure.hpp"
#include "ddspme/probes.hpp"
#include "ddspme/rng.hpp"

#ifndef DDSPME_VERSION
#define DDSPME_VERSION "0.1.0"
#endif

namespace ddspme {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitSchema = 2;
inline constexpr int kExitNumerical = 3;
inline constexpr int kExitProbe = 4;

inline const char* artifact_version() { return DDSPME_VERSION; }

// Files a task wrote, relative to the output directory, in write order.
class OutputSet {
 public:
  explicit OutputSet(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::string path(const std::string& name) {
    files_.push_back(name);
    return (dir_ / name).string();
  }

  void write_json(const std::string& name, const nlohmann::json& j) {
    std::ofstream out(path(name));
    if (!out) throw Error("cannot open " + (dir_ / name).string());
    out << j.dump(2) << '\n';
  }

  const std::vector<std::string>& files() const { return files_; }
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  std::vector<std::string> files_;
};

namespace detail {

inline nlohmann::json finite_or_null(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); }

inline void write_iterations_csv(OutputSet& out, const std::vector<PicardDiagnostics>& windows) {
  CsvWriter csv(out.path("picard_iterations.csv"));
  csv.header({"window", "t_start", "t_end", "iteration", "distance", "ratio"});
  for (const auto& w : windows) {
    for (std::size_t k = 0; k < w.distances.size(); ++k) {
      const double ratio = k == 0 ? std::numeric_limits<double>::quiet_NaN() : w.ratios[k - 1];
      csv.row(w.window, w.t_start, w.t_end, k + 1, w.distances[k], ratio);
    }
  }
}

inline nlohmann::json moments_json(const SpectralOperator& op, const Ensemble& x) {
  const EmpiricalMeasure mu(x);
  return {{"l2", second_moment(mu, op, Space::L2)},
          {"dual", second_moment(mu, op, Space::F12Dual)},
          {"f12", second_moment(mu, op, Space::F12)}};
}

inline nlohmann::json task_solve(const ExperimentConfig& c, OutputSet& out, bool save_trajectory) {
  const SpectralOperator op = c.op.build();
  const EmpiricalMeasure init = sample_initial(op, c.run.M, c.init, c.run.seed);
  const NoisePlan noise = c.noise_plan();
  SolveResult res = solve(op, c.model, c.run.eps, c.run.lam, init, c.run.T, c.run.n_steps, c.picard, noise,
                          c.run.integrator);
  res.trajectory.model_hash = model_hash(c.model);

  // Re-integrating against the returned flow must reproduce the ensemble.
  const TrajectoryEnsemble again = integrate_frozen(op, c.model, c.run.eps, c.run.lam, res.flow, init,
                                                    res.trajectory.grid, noise, c.run.integrator);
  const bool bitwise = again.states == res.trajectory.states;
  const double residual = flow_distance(op, res.flow, again.law(), 0.5 * res.c_hat, PicardConfig::exact_ot());

  if (save_trajectory) {
    const std::string bin = out.path("trajectory.bin");
    write_trajectory(res.trajectory, bin, out.path("trajectory.json"));
  }
  write_ensemble_stats(res.trajectory, op, out.path("ensemble_stats.csv"));
  write_iterations_csv(out, res.windows);
  nlohmann::json windows = nlohmann::json::array();
  for (const auto& w : res.windows) windows.push_back(to_json(w));
  return {{"c_hat", res.c_hat},
          {"c_hat_source", res.c_hat_source},
          {"window_length", c.picard.theta / res.c_hat},
          {"windows", windows},
          {"self_consistency", {{"bitwise", bitwise}, {"flow_distance", residual}}},
          {"initial_moments", moments_json(op, init.particles())},
          {"terminal_moments", moments_json(op, res.trajectory.terminal())}};
}

inline nlohmann::json task_picard_diagnose(const ExperimentConfig& c, OutputSet& out) {
  const SpectralOperator op = c.op.build();
  const EmpiricalMeasure init = sample_initial(op, c.run.M, c.init, c.run.seed);
  const NoisePlan noise = c.noise_plan();
  const TimeGrid full = TimeGrid::uniform(0.0, c.run.T, c.run.n_steps);
  PicardConfig cfg = c.picard;
  std::string source;
  cfg.c_hat = resolve_c_hat(op, c.model, c.run.eps, c.run.lam, init, full, c.picard, noise, c.run.integrator, &source);
  const std::size_t per_window = std::max<std::size_t>(
      1, std::min(c.run.n_steps,
                  static_cast<std::size_t>(std::floor(cfg.window_length() / full.dt * (1.0 + 1e-12)))));
  const TimeGrid grid = full.window(0, per_window);
  WindowResult wr = picard_window(op, c.model, c.run.eps, c.run.lam, init, grid, cfg, noise, c.run.integrator);
  write_iterations_csv(out, {wr.diagnostics});

  const double t0 = grid.t_end() - grid.t_start();
  const double bound = std::sqrt(cfg.c_hat * t0) + 0.1;
  const double max_ratio =
      wr.diagnostics.ratios.empty() ? 0.0 : *std::max_element(wr.diagnostics.ratios.begin(), wr.diagnostics.ratios.end());

  CsvWriter csv(out.path("contraction.csv"));
  csv.header({"fraction", "window_length", "initial_distance", "image_distance", "ratio", "implied_c"});
  nlohmann::json est = nlohmann::json::array();
  const double spread = std::sqrt(std::max(second_moment(init, op, Space::F12Dual), 1e-12));
  double c_min = std::numeric_limits<double>::infinity(), c_max = 0.0;
  for (double f : c.diagnose.window_fractions) {
    const auto steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(f * static_cast<double>(per_window))));
    const TimeGrid g = full.window(0, steps);
    const auto nodes = g.nodes();
    if (c.model.measure_free()) {
      csv.row(f, g.t_end() - g.t_start(), std::numeric_limits<double>::quiet_NaN(),
              std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0);
      est.push_back({{"fraction", f}, {"ratio", 0.0}, {"implied_c", 0.0}});
      c_min = std::min(c_min, 0.0);
      continue;
    }
    const ContractionEstimate e = estimate_contraction(
        op, c.model, c.run.eps, c.run.lam, init, g, MeasureFlow::constant(init, nodes),
        shifted_constant_flow(op, init, nodes, c.diagnose.probe_shift * spread), noise, 0.0, c.run.integrator,
        cfg.ot);
    csv.row(f, g.t_end() - g.t_start(), e.initial_distance, e.image_distance, e.ratio, e.implied_c);
    est.push_back({{"fraction", f},
                   {"window_length", g.t_end() - g.t_start()},
                   {"ratio", e.ratio},
                   {"implied_c", e.implied_c}});
    c_min = std::min(c_min, e.implied_c);
    c_max = std::max(c_max, e.implied_c);
  }
  const double mid = 0.5 * (c_min + c_max);
  return {{"c_hat", cfg.c_hat},
          {"c_hat_source", source},
          {"window_length", t0},
          {"ratio_bound", bound},
          {"max_ratio", max_ratio},
          {"ratios_below_bound", max_ratio < bound},
          {"window", to_json(wr.diagnostics)},
          {"contraction_estimates", est},
          {"implied_c_relative_spread", mid > 0 ? (c_max - c_min) / (2.0 * mid) : 0.0}};
}

inline SweepSetup sweep_setup(const ExperimentConfig& c) {
  SweepSetup s;
  s.T = c.run.T;
  s.n_steps = c.run.n_steps;
  s.picard = c.picard;
  s.integrator = c.run.integrator;
  s.bootstrap_resamples = c.sweep.bootstrap_resamples;
  s.bootstrap_seed = c.sweep.bootstrap_seed;
  return s;
}

inline nlohmann::json task_sweep(const ExperimentConfig& c, OutputSet& out, bool lambda) {
  const SpectralOperator op = c.op.build();
  const EmpiricalMeasure init = sample_initial(op, c.run.M, c.init, c.run.seed);
  const SweepTable t = lambda ? lambda_sweep(op, c.model, c.sweep.eps, c.sweep.values, init, c.noise_plan(),
                                             sweep_setup(c))
                              : epsilon_sweep(op, c.model, c.sweep.values, init, c.noise_plan(), sweep_setup(c));
  write_sweep_csv(t, out.path("sweep.csv"));
  nlohmann::json j = to_json(t);
  j["slope_in_range"] = std::isfinite(t.slope) && t.slope >= 0.7 && t.slope <= 1.3;
  return j;
}

struct ProbeOutcome {
  nlohmann::json report;
  bool diagonal_pass = true;
};

inline ProbeOutcome run_probes(const ExperimentConfig& c) {
  const SpectralOperator op = c.op.build();
  ProbeSampler s;
  s.seed = c.probe.seed;
  s.measure_size = c.probe.measure_size;
  s.field_scale = c.probe.field_scale;
  s.nearby = c.probe.nearby;
  const std::size_t n = c.probe.samples;
  const ModelConstants& k = c.model.constants;

  std::vector<AssumptionReport> diag{probe_A1(c.model.drift, op, s, n, ProbeMode::diagonal),
                                     probe_A2(c.model.drift, op, k, s, n), probe_A3(c.model.drift, op, k, s, n),
                                     probe_A4(c.model.noise, op, k, s, n), probe_growth(c.model.noise, op, k, s, n)};
  diag[0].hypothesis = "A1_diagonal";
  ProbeOutcome res;
  nlohmann::json reports = nlohmann::json::array();
  for (const auto& r : diag) {
    reports.push_back(to_json(r));
    res.diagonal_pass = res.diagonal_pass && r.passed();
  }
  nlohmann::json j{{"samples", n}, {"declared", to_json(k)}, {"reports", reports}};
  if (c.probe.cross) {
    AssumptionReport cross = probe_A1(c.model.drift, op, s, n, ProbeMode::cross);
    cross.hypothesis = "A1_cross";
    j["cross"] = to_json(cross);
  }
  j["diagonal_pass"] = res.diagonal_pass;
  res.report = std::move(j);
  return res;
}

inline nlohmann::json task_apriori(const ExperimentConfig& c, OutputSet& out) {
  const SpectralOperator op = c.op.build();
  const EmpiricalMeasure init = sample_initial(op, c.run.M, c.init, c.run.seed);
  SolveResult res = solve(op, c.model, c.run.eps, c.run.lam, init, c.run.T, c.run.n_steps, c.picard,
                          c.noise_plan(), c.run.integrator);
  res.trajectory.model_hash = model_hash(c.model);
  write_ensemble_stats(res.trajectory, op, out.path("ensemble_stats.csv"));
  const ModelConstants& k = c.model.constants;
  return {{"declared", to_json(apriori_check(res.trajectory, c.model, op, k))},
          {"over_declared_x2", to_json(apriori_check(res.trajectory, c.model, op, k.scaled(2.0)))},
          {"under_declared_x0.1", to_json(apriori_check(res.trajectory, c.model, op, k.scaled(0.1)))},
          {"c_hat", res.c_hat}};
}

// Exact assignment against a permutation scan for small M, and entropic
// values at decreasing regularization against exact.
inline nlohmann::json task_oracle_ot(const ExperimentConfig& c, OutputSet& out) {
  const SpectralOperator op = c.op.build();
  const CounterRng rng(c.oracle.seed, Stream::oracle);
  auto random_measure = [&](std::size_t inst, std::size_t slot, std::size_t m) {
    Ensemble x(op.dim(), static_cast<Eigen::Index>(m));
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      for (Eigen::Index k = 0; k < x.rows(); ++k) {
        x(k, j) = rng.normal(inst, slot * 64 + static_cast<std::uint64_t>(j), static_cast<std::uint64_t>(k));
      }
    }
    return EmpiricalMeasure(std::move(x));
  };

  CsvWriter csv(out.path("oracle_ot.csv"));
  csv.header({"instance", "method", "M", "value", "iterations", "reference"});
  double max_err = 0.0;
  for (std::size_t inst = 0; inst < c.oracle.instances; ++inst) {
    const std::size_t m = 1 + static_cast<std::size_t>(rng.bits(inst, 0xFFFF) % c.oracle.max_particles);
    const EmpiricalMeasure mu = random_measure(inst, 1, m), nu = random_measure(inst, 2, m);
    const W2Result ex = w2(op, mu, nu, PicardConfig::exact_ot());
    const Eigen::MatrixXd cost = cost_matrix(op, mu, nu);
    std::vector<int> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
      double acc = 0.0;
      for (std::size_t i = 0; i < m; ++i) acc += cost(static_cast<Eigen::Index>(i), perm[i]);
      best = std::min(best, acc);
    } while (std::next_permutation(perm.begin(), perm.end()));
    const double brute = std::sqrt(best / static_cast<double>(m));
    max_err = std::max(max_err, std::abs(ex.value - brute));
    csv.row(inst, "exact", m, ex.value, 0, brute);
  }

  std::size_t monotone = 0;
  for (std::size_t inst = 0; inst < c.oracle.entropic_instances; ++inst) {
    const std::size_t id = c.oracle.instances + inst;
    const EmpiricalMeasure mu = random_measure(id, 1, c.oracle.entropic_particles);
    const EmpiricalMeasure nu = random_measure(id, 2, c.oracle.entropic_particles);
    const double exact = w2(op, mu, nu, PicardConfig::exact_ot()).value;
    double prev_err = std::numeric_limits<double>::infinity();
    bool mono = true;
    for (double e : c.oracle.entropic_eps) {
      W2Options o;
      o.method = OtMethod::entropic;
      o.eps_rel = e;
      const W2Result r = w2(op, mu, nu, o);
      const double err = std::abs(r.value - exact);
      mono = mono && err <= prev_err;
      prev_err = err;
      csv.row(id, "entropic", c.oracle.entropic_particles, r.value, r.plan.iterations, exact);
    }
    monotone += mono ? 1 : 0;
  }
  return {{"instances", c.oracle.instances},
          {"max_abs_error_exact_vs_bruteforce", max_err},
          {"entropic_instances", c.oracle.entropic_instances},
          {"entropic_monotone", monotone}};
}

inline std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

inline void write_manifest(const std::filesystem::path& dir, const nlohmann::json& m) {
  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot write manifest in " + dir.string());
    out << m.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, dir / "manifest.json");
}

// Files listed by an earlier manifest in `dir` are removed so that every
// file present after a run belongs to the new manifest.
inline void clear_previous_outputs(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) return;
  try {
    std::ifstream in(path);
    const auto old = nlohmann::json::parse(in);
    for (const auto& f : old.value("outputs", nlohmann::json::array())) {
      const std::filesystem::path p = dir / f.get<std::string>();
      if (p.lexically_normal().parent_path() == dir.lexically_normal()) std::filesystem::remove(p);
    }
  } catch (const std::exception&) {
    // An unreadable manifest is simply replaced.
  }
}

}  // namespace detail

struct RunRequest {
  std::string task;         // empty: use the config's task
  std::string config_path;
  std::string out_dir;      // empty: use the config's output
  bool strict = false;
  bool save_trajectory = true;
};

struct RunOutcome {
  int exit_code = kExitOk;
  std::filesystem::path out_dir;
  std::vector<std::string> outputs;
  nlohmann::json summary;
};

// Runs one task end to end: validation, manifest (written before and
// finalized after), outputs, and an error record on failure.
inline RunOutcome run_experiment(const RunRequest& req, std::ostream& log = std::cerr) {
  RunOutcome res;
  nlohmann::json raw;
  Violations v;
  ExperimentConfig cfg;
  std::string load_error;
  try {
    raw = read_json_file(req.config_path);
    cfg = parse_config(raw, v);
  } catch (const std::exception& e) {
    load_error = e.what();
  }
  std::string task = req.task.empty() ? cfg.task : req.task;
  if (load_error.empty() && task.empty()) v.add("config.task: no task given on the command line or in the config");
  if (!task.empty() && !is_task(task)) v.add("task: unknown task '" + task + "'");
  if (load_error.empty() && req.task.empty() == false && !cfg.task.empty() && cfg.task != req.task) {
    log << "note: command-line task '" << req.task << "' overrides config task '" << cfg.task << "'\n";
  }

  std::string out_name = req.out_dir;
  if (out_name.empty()) out_name = load_error.empty() ? cfg.output : "out";
  res.out_dir = out_name;
  std::filesystem::create_directories(res.out_dir);
  detail::clear_previous_outputs(res.out_dir);

  const auto started = std::chrono::steady_clock::now();
  nlohmann::json manifest{{"artifact_version", artifact_version()},
                          {"task", task},
                          {"config_path", req.config_path},
                          {"config_hash", load_error.empty() ? cfg.hash() : ""},
                          {"status", "running"},
                          {"started_at", detail::utc_now()},
                          {"outputs", nlohmann::json::array()}};
  if (load_error.empty()) {
    manifest["seeds"] = {{"init", cfg.run.seed},
                         {"noise", cfg.run.noise_seed},
                         {"probe", cfg.probe.seed},
                         {"bootstrap", cfg.sweep.bootstrap_seed},
                         {"oracle", cfg.oracle.seed}};
  }
  detail::write_manifest(res.out_dir, manifest);

  OutputSet out(res.out_dir);
  nlohmann::json error;
  if (!load_error.empty() || !v.empty()) {
    res.exit_code = kExitSchema;
    error = {{"kind", "schema"}, {"message", load_error.empty() ? "config validation failed" : load_error},
             {"violations", v.items}};
  } else {
    try {
      nlohmann::json summary;
      if (task == "solve") {
        summary = detail::task_solve(cfg, out, req.save_trajectory);
      } else if (task == "picard-diagnose") {
        summary = detail::task_picard_diagnose(cfg, out);
      } else if (task == "sweep-lambda") {
        summary = detail::task_sweep(cfg, out, true);
      } else if (task == "sweep-epsilon") {
        summary = detail::task_sweep(cfg, out, false);
      } else if (task == "probe-assumptions") {
        auto p = detail::run_probes(cfg);
        summary = p.report;
        if (req.strict && !p.diagonal_pass) {
          res.exit_code = kExitProbe;
          error = {{"kind", "probe"}, {"message", "assumption probe failed under --strict"}};
        }
      } else if (task == "apriori") {
        summary = detail::task_apriori(cfg, out);
      } else if (task == "oracle-ot") {
        summary = detail::task_oracle_ot(cfg, out);
      }
      summary["task"] = task;
      summary["config_hash"] = cfg.hash();
      out.write_json("summary.json", summary);
      res.summary = summary;
    } catch (const PicardError& e) {
      res.exit_code = kExitNumerical;
      error = {{"kind", "numerical"}, {"message", e.what()}, {"window", e.diagnostics.window},
               {"diagnostics", to_json(e.diagnostics)}};
    } catch (const NumericalAbort& e) {
      res.exit_code = kExitNumerical;
      error = {{"kind", "numerical"}, {"message", e.what()}, {"step", e.step},
               {"window", e.window >= 0 ? nlohmann::json(e.window) : nlohmann::json(nullptr)}};
    } catch (const ConvergenceError& e) {
      res.exit_code = kExitNumerical;
      error = {{"kind", "numerical"}, {"message", e.what()}, {"iterations", e.iterations},
               {"last_value", detail::finite_or_null(e.last_value)}};
    } catch (const QuadratureError& e) {
      res.exit_code = kExitNumerical;
      error = {{"kind", "numerical"}, {"message", e.what()}, {"error_estimate", e.error_estimate}};
    } catch (const InvalidArgument& e) {
      res.exit_code = kExitSchema;
      error = {{"kind", "schema"}, {"message", e.what()}, {"violations", std::vector<std::string>{e.what()}}};
    } catch (const std::exception& e) {
      res.exit_code = kExitRuntime;
      error = {{"kind", "runtime"}, {"message", e.what()}};
    }
  }
  if (!error.is_null()) {
    error["exit_code"] = res.exit_code;
    error["task"] = task;
    out.write_json("error.json", error);
    log << "error: " << error.value("message", std::string()) << '\n';
    for (const auto& s : v.items) log << "  " << s << '\n';
  }

  res.outputs = out.files();
  manifest["outputs"] = res.outputs;
  manifest["status"] = res.exit_code == kExitOk ? "ok" : "failed";
  manifest["exit_code"] = res.exit_code;
  manifest["finished_at"] = detail::utc_now();
  manifest["wall_clock_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  detail::write_manifest(res.out_dir, manifest);
  return res;
}

}  // namespace ddspme
