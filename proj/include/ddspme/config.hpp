#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddspme/approximation.hpp"
#include "ddspme/error.hpp"
#include "ddspme/fixed_point.hpp"
#include "ddspme/integrator.hpp"
#include "ddspme/json_util.hpp"
#include "ddspme/measure.hpp"
#include "ddspme/model.hpp"
#include "ddspme/probes.hpp"
#include "ddspme/spectral_operator.hpp"

namespace ddspme {

inline const std::vector<std::string>& task_names() {
  static const std::vector<std::string> names{"solve",      "picard-diagnose",   "sweep-lambda", "sweep-epsilon",
                                              "probe-assumptions", "apriori", "oracle-ot"};
  return names;
}

inline bool is_task(const std::string& t) {
  for (const auto& n : task_names()) {
    if (n == t) return true;
  }
  return false;
}

struct OperatorConfig {
  std::string kind = "fractional_laplacian";  // fractional_laplacian | explicit
  std::size_t N = 16;
  double alpha = 1.0;
  double frequency_scale = 1.0;
  std::vector<double> lambdas;
  std::string label;

  SpectralOperator build() const {
    if (kind == "explicit") return SpectralOperator(lambdas, label.empty() ? "explicit" : label);
    const double s = frequency_scale;
    SpectralOperator op = make_fractional_laplacian(N, alpha, [s](std::size_t k) { return s * torus_frequency(k); });
    if (label.empty()) return op;
    const Eigen::VectorXd& l = op.lambdas();
    return SpectralOperator(std::vector<double>(l.data(), l.data() + l.size()), label);
  }
};

struct RunConfig {
  double T = 1.0;
  std::size_t n_steps = 1000;
  std::size_t M = 128;
  std::uint64_t seed = 1;        // initial ensemble
  std::uint64_t noise_seed = 2;  // NoisePlan
  double eps = 0.0;
  double lam = 0.0;
  IntegratorOptions integrator;

  double dt() const { return T / static_cast<double>(n_steps); }
};

struct SweepConfig {
  std::vector<double> values{0.4, 0.2, 0.1, 0.05};
  double eps = 0.0;  // held fixed in the lambda sweep
  std::size_t bootstrap_resamples = 1000;
  std::uint64_t bootstrap_seed = 17;
};

struct ProbeConfig {
  std::size_t samples = 10000;
  std::uint64_t seed = 23;
  std::size_t measure_size = 4;
  double field_scale = 1.0;
  double nearby = 1e-3;
  bool cross = true;  // also run the literal cross-measure monotonicity probe
};

struct DiagnoseConfig {
  std::vector<double> window_fractions{1.0, 0.5, 0.25};
  double probe_shift = 0.1;  // seed flow offset, relative to the dual-norm spread of the initial law
};

struct OracleConfig {
  std::size_t instances = 500;
  std::size_t max_particles = 6;
  std::size_t entropic_instances = 50;
  std::size_t entropic_particles = 8;
  std::vector<double> entropic_eps{1.0, 0.1, 0.01};
  std::uint64_t seed = 29;
};

struct ExperimentConfig {
  std::string task;
  OperatorConfig op;
  ModelSpec model;
  RunConfig run;
  InitSpec init;
  PicardConfig picard;
  SweepConfig sweep;
  ProbeConfig probe;
  DiagnoseConfig diagnose;
  OracleConfig oracle;
  std::string output = "out";
  nlohmann::json raw;

  NoisePlan noise_plan() const { return NoisePlan{run.noise_seed, model.noise.K}; }
  // Hash of the canonical (key-sorted, whitespace-free) JSON text.
  std::string hash() const { return hex64(fnv1a(raw.dump())); }
};

namespace detail {
inline std::vector<double> read_doubles(ObjectReader& r, const std::string& key, std::vector<double> fallback) {
  const nlohmann::json* node = r.raw(key);
  if (!node) return fallback;
  if (!node->is_array()) {
    r.violations().add(r.path() + "." + key + ": expected an array of numbers");
    return fallback;
  }
  std::vector<double> out;
  for (const auto& x : *node) {
    if (!x.is_number()) {
      r.violations().add(r.path() + "." + key + ": expected an array of numbers");
      return fallback;
    }
    out.push_back(x.get<double>());
  }
  return out;
}

inline OperatorConfig operator_config(const nlohmann::json& j, Violations& v) {
  OperatorConfig c;
  ObjectReader r(j, "operator", v);
  c.kind = r.get<std::string>("kind", c.kind);
  c.label = r.get<std::string>("label", c.label);
  if (c.kind == "fractional_laplacian") {
    c.N = r.required<std::size_t>("N", c.N);
    c.alpha = r.required<double>("alpha", c.alpha);
    c.frequency_scale = r.get<double>("frequency_scale", c.frequency_scale);
    if (c.N < 1) v.add("operator.N: must be at least 1");
    if (!(std::isfinite(c.alpha) && c.alpha > 0.0 && c.alpha <= 1.0)) v.add("operator.alpha: alpha outside (0,1]");
    if (!(std::isfinite(c.frequency_scale) && c.frequency_scale > 0.0))
      v.add("operator.frequency_scale: must be positive");
  } else if (c.kind == "explicit") {
    c.lambdas = read_doubles(r, "lambdas", {});
    c.N = c.lambdas.size();
    if (c.lambdas.empty()) v.add("operator.lambdas: need at least one eigenvalue");
    for (double l : c.lambdas) {
      if (!(std::isfinite(l) && l >= 0.0)) {
        v.add("operator.lambdas: eigenvalues must be finite and nonnegative");
        break;
      }
    }
  } else {
    v.add("operator.kind: unknown operator kind '" + c.kind + "'");
  }
  r.finish();
  return c;
}

inline RunConfig run_config(const nlohmann::json& j, Violations& v, std::optional<std::size_t>& K_override) {
  RunConfig c;
  ObjectReader r(j, "run", v);
  c.T = r.required<double>("T", c.T);
  c.n_steps = r.required<std::size_t>("n_steps", c.n_steps);
  c.M = r.required<std::size_t>("M", c.M);
  c.seed = r.get<std::uint64_t>("seed", c.seed);
  c.noise_seed = r.get<std::uint64_t>("noise_seed", c.seed + 1);
  c.eps = r.get<double>("eps", c.eps);
  c.lam = r.get<double>("lambda", c.lam);
  if (r.has("K")) K_override = r.get<std::size_t>("K", 0);
  const auto scheme = r.get<std::string>("scheme", "semi_implicit");
  if (scheme == "semi_implicit") c.integrator.scheme = StepScheme::semi_implicit;
  else if (scheme == "drift_implicit") c.integrator.scheme = StepScheme::drift_implicit;
  else v.add("run.scheme: unknown scheme '" + scheme + "'");
  c.integrator.inner_tol = r.get<double>("inner_tol", c.integrator.inner_tol);
  c.integrator.inner_max_iter = r.get<std::size_t>("inner_max_iter", c.integrator.inner_max_iter);
  r.finish();
  if (!(std::isfinite(c.T) && c.T > 0.0)) v.add("run.T: must be positive");
  if (c.n_steps < 1) v.add("run.n_steps: must be at least 1");
  if (c.M < 1) v.add("run.M: must be at least 1");
  if (!(c.eps >= 0.0 && c.eps < 1.0)) v.add("run.eps: must lie in [0,1)");
  if (!(c.lam >= 0.0 && c.lam < 1.0)) v.add("run.lambda: must lie in [0,1)");
  if (!(c.integrator.inner_tol > 0.0)) v.add("run.inner_tol: must be positive");
  return c;
}

inline InitSpec init_config(const nlohmann::json& j, Violations& v) {
  InitSpec s;
  ObjectReader r(j, "init", v);
  s.amplitude = r.get<double>("amplitude", s.amplitude);
  s.decay = r.get<double>("decay", s.decay);
  s.mean = r.get<double>("mean", s.mean);
  s.modes = r.get<std::size_t>("modes", s.modes);
  r.finish();
  if (!(std::isfinite(s.amplitude) && s.amplitude >= 0.0)) v.add("init.amplitude: must be nonnegative");
  if (!std::isfinite(s.decay)) v.add("init.decay: must be finite");
  if (!std::isfinite(s.mean)) v.add("init.mean: must be finite");
  return s;
}

inline W2Options ot_config(const nlohmann::json& j, Violations& v, const std::string& path) {
  W2Options o = PicardConfig::exact_ot();
  ObjectReader r(j, path, v);
  const auto m = r.get<std::string>("method", "exact");
  if (m == "exact") o.method = OtMethod::exact;
  else if (m == "entropic") o.method = OtMethod::entropic;
  else if (m == "automatic") o.method = OtMethod::automatic;
  else v.add(path + ".method: unknown OT method '" + m + "'");
  o.eps_rel = r.get<double>("eps_rel", o.eps_rel);
  o.max_iter = r.get<std::size_t>("max_iter", o.max_iter);
  o.tol = r.get<double>("tol", o.tol);
  o.exact_max_particles = r.get<std::size_t>("exact_max_particles", o.exact_max_particles);
  r.finish();
  if (!(o.eps_rel > 0.0)) v.add(path + ".eps_rel: must be positive");
  return o;
}

inline PicardConfig picard_config(const nlohmann::json& j, Violations& v) {
  PicardConfig c;
  ObjectReader r(j, "picard", v);
  c.c_hat = r.get<double>("c_hat", c.c_hat);
  c.theta = r.get<double>("theta", c.theta);
  c.tol = r.get<double>("tol", c.tol);
  c.max_iter = r.get<std::size_t>("max_iter", c.max_iter);
  if (const auto* o = r.raw("ot")) c.ot = ot_config(*o, v, "picard.ot");
  r.finish();
  c.validate(v);
  return c;
}

inline SweepConfig sweep_config(const nlohmann::json& j, Violations& v) {
  SweepConfig c;
  ObjectReader r(j, "sweep", v);
  c.values = read_doubles(r, "values", c.values);
  c.eps = r.get<double>("eps", c.eps);
  c.bootstrap_resamples = r.get<std::size_t>("bootstrap_resamples", c.bootstrap_resamples);
  c.bootstrap_seed = r.get<std::uint64_t>("bootstrap_seed", c.bootstrap_seed);
  r.finish();
  std::vector<double> d = c.values;
  std::sort(d.begin(), d.end());
  d.erase(std::unique(d.begin(), d.end()), d.end());
  if (d.size() < 3) v.add("sweep.values: need at least 3 distinct values");
  for (double x : c.values) {
    if (!(x > 0.0 && x < 1.0)) {
      v.add("sweep.values: every value must lie in (0,1)");
      break;
    }
  }
  if (!(c.eps >= 0.0 && c.eps < 1.0)) v.add("sweep.eps: must lie in [0,1)");
  return c;
}

inline ProbeConfig probe_config(const nlohmann::json& j, Violations& v) {
  ProbeConfig c;
  ObjectReader r(j, "probe", v);
  c.samples = r.get<std::size_t>("samples", c.samples);
  c.seed = r.get<std::uint64_t>("seed", c.seed);
  c.measure_size = r.get<std::size_t>("measure_size", c.measure_size);
  c.field_scale = r.get<double>("field_scale", c.field_scale);
  c.nearby = r.get<double>("nearby", c.nearby);
  c.cross = r.get<bool>("cross", c.cross);
  r.finish();
  if (c.samples < 2) v.add("probe.samples: must be at least 2");
  if (c.measure_size < 1) v.add("probe.measure_size: must be at least 1");
  if (!(c.field_scale > 0.0)) v.add("probe.field_scale: must be positive");
  if (!(c.nearby > 0.0)) v.add("probe.nearby: must be positive");
  return c;
}

inline DiagnoseConfig diagnose_config(const nlohmann::json& j, Violations& v) {
  DiagnoseConfig c;
  ObjectReader r(j, "diagnose", v);
  c.window_fractions = read_doubles(r, "window_fractions", c.window_fractions);
  c.probe_shift = r.get<double>("probe_shift", c.probe_shift);
  r.finish();
  for (double f : c.window_fractions) {
    if (!(f > 0.0 && f <= 1.0)) {
      v.add("diagnose.window_fractions: each fraction must lie in (0,1]");
      break;
    }
  }
  if (!(c.probe_shift > 0.0)) v.add("diagnose.probe_shift: must be positive");
  return c;
}

inline OracleConfig oracle_config(const nlohmann::json& j, Violations& v) {
  OracleConfig c;
  ObjectReader r(j, "oracle", v);
  c.instances = r.get<std::size_t>("instances", c.instances);
  c.max_particles = r.get<std::size_t>("max_particles", c.max_particles);
  c.entropic_instances = r.get<std::size_t>("entropic_instances", c.entropic_instances);
  c.entropic_particles = r.get<std::size_t>("entropic_particles", c.entropic_particles);
  c.entropic_eps = read_doubles(r, "entropic_eps", c.entropic_eps);
  c.seed = r.get<std::uint64_t>("seed", c.seed);
  r.finish();
  if (c.max_particles < 1 || c.max_particles > 8) v.add("oracle.max_particles: must lie in [1,8]");
  if (c.entropic_particles < 1) v.add("oracle.entropic_particles: must be at least 1");
  for (double e : c.entropic_eps) {
    if (!(e > 0.0)) {
      v.add("oracle.entropic_eps: values must be positive");
      break;
    }
  }
  return c;
}
}  // namespace detail

// Parses and checks a config, collecting every violation instead of stopping
// at the first. Numerical work is limited to building the operator.
inline ExperimentConfig parse_config(const nlohmann::json& j, Violations& v) {
  ExperimentConfig c;
  c.raw = j;
  ObjectReader r(j, "config", v);
  c.task = r.get<std::string>("task", "");
  if (!c.task.empty() && !is_task(c.task)) v.add("config.task: unknown task '" + c.task + "'");
  c.output = r.get<std::string>("output", c.output);

  if (const auto* o = r.raw("operator")) c.op = detail::operator_config(*o, v);
  else v.add("config.operator: required key missing");
  const std::size_t n_modes = c.op.N;

  if (const auto* m = r.raw("model")) c.model = model_from_json(*m, v, n_modes);
  else v.add("config.model: required key missing");

  std::optional<std::size_t> K_override;
  if (const auto* run = r.raw("run")) c.run = detail::run_config(*run, v, K_override);
  else v.add("config.run: required key missing");
  if (K_override) {
    const bool noise_has_K = j.contains("model") && j["model"].contains("noise") && j["model"]["noise"].contains("K");
    if (noise_has_K && *K_override != c.model.noise.K) v.add("run.K: disagrees with model.noise.K");
    c.model.noise.K = *K_override;
    if (c.model.noise.K > n_modes) v.add("run.K: exceeds the operator's mode count");
  }

  if (const auto* x = r.raw("init")) c.init = detail::init_config(*x, v);
  if (const auto* x = r.raw("picard")) c.picard = detail::picard_config(*x, v);
  if (const auto* x = r.raw("sweep")) c.sweep = detail::sweep_config(*x, v);
  if (const auto* x = r.raw("probe")) c.probe = detail::probe_config(*x, v);
  if (const auto* x = r.raw("diagnose")) c.diagnose = detail::diagnose_config(*x, v);
  if (const auto* x = r.raw("oracle")) c.oracle = detail::oracle_config(*x, v);
  r.finish();

  // Cross-block invariants.
  if (v.empty()) {
    try {
      const SpectralOperator op = c.op.build();
      if (c.run.integrator.scheme == StepScheme::semi_implicit) {
        const double eps_max =
            std::max(c.run.eps, c.task == "sweep-epsilon" ? *std::max_element(c.sweep.values.begin(),
                                                                               c.sweep.values.end())
                                                          : 0.0);
        const double bound = explicit_dt_bound(op, c.model.drift, eps_max);
        if (c.run.dt() > bound) {
          v.add("run.n_steps: dt = " + format_double(c.run.dt()) +
                " exceeds the explicit drift stability bound 1/(Lip(Psi) max_k(lambda_k + eps)) = " +
                format_double(bound));
        }
      }
    } catch (const std::exception& e) {
      v.add(std::string("operator: ") + e.what());
    }
  }
  return c;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config file '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidArgument("config '" + path + "' is not valid JSON: " + e.what());
  }
}

// Full validation without running anything.
inline std::vector<std::string> validate_config(const nlohmann::json& j) {
  Violations v;
  parse_config(j, v);
  return v.items;
}

}  // namespace ddspme
