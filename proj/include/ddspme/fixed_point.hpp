#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddspme/error.hpp"
#include "ddspme/integrator.hpp"
#include "ddspme/measure.hpp"
#include "ddspme/model.hpp"
#include "ddspme/spectral_operator.hpp"

namespace ddspme {

struct PicardConfig {
  double c_hat = 0.0;       // working contraction constant; 0 defers to solve()'s resolution
  double theta = 0.5;       // window length is theta / c_hat
  double tol = 1e-6;        // absolute stop on the discounted flow distance
  std::size_t max_iter = 50;
  W2Options ot = exact_ot();

  static W2Options exact_ot() {
    W2Options o;
    o.method = OtMethod::exact;
    return o;
  }

  double window_length() const { return theta / c_hat; }
  double lambda_disc() const { return 0.5 * c_hat; }

  void validate(Violations& v, const std::string& path = "picard") const {
    if (!(theta > 0.0 && theta < 1.0)) v.add(path + ".theta: must lie in (0,1)");
    if (!(tol > 0.0)) v.add(path + ".tol: must be positive");
    if (max_iter < 1) v.add(path + ".max_iter: must be at least 1");
    if (!(c_hat >= 0.0) || !std::isfinite(c_hat)) v.add(path + ".c_hat: must be finite and nonnegative");
  }
};

struct PicardDiagnostics {
  std::size_t window = 0;
  double t_start = 0.0;
  double t_end = 0.0;
  double c_hat = 0.0;
  std::vector<double> distances;  // d_k = flow_distance(mu_k, mu_{k+1})
  std::vector<double> ratios;     // d_{k+1} / d_k
  std::size_t iterations = 0;
  bool converged = false;
};

class PicardError : public ConvergenceError {
 public:
  PicardError(const std::string& msg, PicardDiagnostics diag)
      : ConvergenceError(msg, diag.iterations, diag.ratios.empty() ? NAN : diag.ratios.back()),
        diagnostics(std::move(diag)) {}
  PicardDiagnostics diagnostics;
};

struct WindowResult {
  MeasureFlow flow;
  TrajectoryEnsemble trajectory;
  PicardDiagnostics diagnostics;
};

// Fixed point of the law map on one window. Every iterate is driven by the
// same noise, starting from the constant flow at the initial law. The result
// pairs the converged flow mu_k with the trajectory integrated against it, so
// re-running integrate_frozen on that flow reproduces the trajectory exactly.
inline WindowResult picard_window(const SpectralOperator& op, const ModelSpec& model, double eps, double lam,
                                  const EmpiricalMeasure& init, const TimeGrid& grid, const PicardConfig& config,
                                  const NoisePlan& noise, const IntegratorOptions& opts = {}) {
  require(config.c_hat > 0.0, "picard_window: c_hat must be positive");
  require(init.size() >= 1, "picard_window: empty initial ensemble");
  const double length = grid.t_end() - grid.t_start();
  require(length <= config.window_length() * (1.0 + 1e-9),
          "picard_window: window longer than theta / c_hat");
  const NoiseTable table(noise, grid, init.size());
  const std::vector<double> nodes = grid.nodes();

  PicardDiagnostics diag;
  diag.t_start = grid.t_start();
  diag.t_end = grid.t_end();
  diag.c_hat = config.c_hat;

  MeasureFlow current = MeasureFlow::constant(init, nodes);
  for (std::size_t k = 0; k < config.max_iter; ++k) {
    TrajectoryEnsemble traj = integrate_frozen(op, model, eps, lam, current, init, grid, noise, opts, &table);
    MeasureFlow next = traj.law();
    const double d = flow_distance(op, current, next, config.lambda_disc(), diag.t_start, diag.t_end, config.ot);
    if (!diag.distances.empty()) {
      const double prev = diag.distances.back();
      diag.ratios.push_back(prev > 0 ? d / prev : 0.0);
    }
    diag.distances.push_back(d);
    diag.iterations = k + 1;
    if (d <= config.tol) {
      diag.converged = true;
      traj.coupling = "picard";
      return WindowResult{std::move(current), std::move(traj), std::move(diag)};
    }
    current = std::move(next);
  }
  throw PicardError("picard_window: no convergence within max_iter", std::move(diag));
}

struct ContractionEstimate {
  double initial_distance = 0.0;
  double image_distance = 0.0;
  double ratio = 0.0;
  double implied_c = 0.0;  // ratio^2 / window length
};

// One application of the law map to two seed flows under common noise.
inline ContractionEstimate estimate_contraction(const SpectralOperator& op, const ModelSpec& model, double eps,
                                                double lam, const EmpiricalMeasure& init, const TimeGrid& grid,
                                                const MeasureFlow& mu0, const MeasureFlow& nu0,
                                                const NoisePlan& noise, double lambda_disc,
                                                const IntegratorOptions& opts = {},
                                                const W2Options& ot = PicardConfig::exact_ot()) {
  const double s = grid.t_start(), t = grid.t_end();
  ContractionEstimate est;
  est.initial_distance = flow_distance(op, mu0, nu0, lambda_disc, s, t, ot);
  if (!(est.initial_distance > 0.0)) throw InvalidArgument("estimate_contraction: zero initial distance");
  const NoiseTable table(noise, grid, init.size());
  const MeasureFlow a = integrate_frozen(op, model, eps, lam, mu0, init, grid, noise, opts, &table).law();
  const MeasureFlow b = integrate_frozen(op, model, eps, lam, nu0, init, grid, noise, opts, &table).law();
  est.image_distance = flow_distance(op, a, b, lambda_disc, s, t, ot);
  est.ratio = est.image_distance / est.initial_distance;
  est.implied_c = est.ratio * est.ratio / (t - s);
  return est;
}

// Constant flow at `init` moved by `shift` in dual norm along e_0.
inline MeasureFlow shifted_constant_flow(const SpectralOperator& op, const EmpiricalMeasure& init,
                                         const std::vector<double>& nodes, double shift) {
  Ensemble x = init.particles();
  x.row(0).array() += shift * std::sqrt(op.one_plus()[0]);
  return MeasureFlow::constant(EmpiricalMeasure(std::move(x)), nodes);
}

struct SolveResult {
  TrajectoryEnsemble trajectory;
  MeasureFlow flow;
  std::vector<PicardDiagnostics> windows;
  double c_hat = 0.0;
  std::string c_hat_source;  // config | bootstrap
};

// Working constant: the configured value, else twice the implied value of
// one contraction estimate on a probe window of at most 100 steps. The
// declared coercivity constant c is a different quantity and is not used.
inline double resolve_c_hat(const SpectralOperator& op, const ModelSpec& model, double eps, double lam,
                            const EmpiricalMeasure& init, const TimeGrid& grid, const PicardConfig& config,
                            const NoisePlan& noise, const IntegratorOptions& opts, std::string* source) {
  if (config.c_hat > 0.0) {
    if (source) *source = "config";
    return config.c_hat;
  }
  if (source) *source = "bootstrap";
  const double horizon = grid.t_end() - grid.t_start();
  if (model.measure_free()) return config.theta / horizon;
  const TimeGrid probe = grid.window(0, std::min<std::size_t>(grid.n_steps, 100));
  const std::vector<double> nodes = probe.nodes();
  const double spread = std::sqrt(std::max(second_moment(init, op, Space::F12Dual), 1e-12));
  const ContractionEstimate est =
      estimate_contraction(op, model, eps, lam, init, probe, MeasureFlow::constant(init, nodes),
                           shifted_constant_flow(op, init, nodes, 0.1 * spread), noise, 0.0, opts);
  const double c = 2.0 * est.implied_c;
  return c > 1e-12 ? c : config.theta / horizon;
}

// Windows of length theta / c_hat glued end to end over [0, T] on a grid of
// n_steps; each window starts from the previous terminal ensemble.
inline SolveResult solve(const SpectralOperator& op, const ModelSpec& model, double eps, double lam,
                         const EmpiricalMeasure& init, double T, std::size_t n_steps, const PicardConfig& config,
                         const NoisePlan& noise, const IntegratorOptions& opts = {}) {
  require(T > 0.0 && std::isfinite(T), "solve: T must be positive");
  const TimeGrid grid = TimeGrid::uniform(0.0, T, n_steps);
  SolveResult res;
  PicardConfig cfg = config;
  cfg.c_hat = resolve_c_hat(op, model, eps, lam, init, grid, config, noise, opts, &res.c_hat_source);
  res.c_hat = cfg.c_hat;
  const std::size_t per_window =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(cfg.window_length() / grid.dt * (1.0 + 1e-12))));

  std::vector<double> flow_times;
  std::vector<EmpiricalMeasure> flow_measures;
  res.trajectory.grid = grid;
  EmpiricalMeasure start = init;
  std::size_t w = 0;
  for (std::size_t first = 0; first < n_steps; first += per_window, ++w) {
    const TimeGrid wg = grid.window(first, std::min(per_window, n_steps - first));
    WindowResult wr;
    try {
      wr = picard_window(op, model, eps, lam, start, wg, cfg, noise, opts);
    } catch (PicardError& e) {
      e.diagnostics.window = w;
      throw PicardError("solve: window " + std::to_string(w) + " failed to converge", e.diagnostics);
    } catch (NumericalAbort& e) {
      e.window = static_cast<std::ptrdiff_t>(w);
      throw;
    }
    wr.diagnostics.window = w;
    const std::size_t skip = first == 0 ? 0 : 1;
    for (std::size_t n = skip; n < wr.trajectory.states.size(); ++n) {
      res.trajectory.states.push_back(std::move(wr.trajectory.states[n]));
    }
    // The step from a window's first node reads that window's flow.
    for (std::size_t n = 0; n + 1 < wr.flow.size(); ++n) {
      flow_times.push_back(wr.flow.times()[n]);
      flow_measures.push_back(wr.flow.measure(n));
    }
    if (first + wg.n_steps == n_steps) {
      flow_times.push_back(wr.flow.times().back());
      flow_measures.push_back(wr.flow.measures().back());
    }
    res.trajectory.noise = wr.trajectory.noise;
    res.trajectory.model_hash = wr.trajectory.model_hash;
    start = EmpiricalMeasure(res.trajectory.states.back());
    res.windows.push_back(std::move(wr.diagnostics));
  }
  res.trajectory.eps = eps;
  res.trajectory.lam = lam;
  res.trajectory.scheme = opts.scheme;
  res.trajectory.coupling = "picard";
  res.flow = MeasureFlow(std::move(flow_times), std::move(flow_measures));
  return res;
}

inline nlohmann::json to_json(const PicardDiagnostics& d) {
  return {{"window", d.window},       {"t_start", d.t_start},   {"t_end", d.t_end},
          {"c_hat", d.c_hat},         {"iterations", d.iterations}, {"converged", d.converged},
          {"distances", d.distances}, {"ratios", d.ratios},
          {"max_ratio", d.ratios.empty() ? 0.0 : *std::max_element(d.ratios.begin(), d.ratios.end())}};
}

}  // namespace ddspme
