#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddspme/csv.hpp"
#include "ddspme/error.hpp"
#include "ddspme/measure.hpp"
#include "ddspme/model.hpp"
#include "ddspme/parallel.hpp"
#include "ddspme/rng.hpp"
#include "ddspme/spectral_operator.hpp"

namespace ddspme {

// Uniform grid. Node n sits at origin + (first_step + n) dt, so a window cut
// out of a longer grid reproduces the longer grid's times and noise keys.
struct TimeGrid {
  double origin = 0.0;
  double dt = 0.0;
  std::size_t first_step = 0;
  std::size_t n_steps = 0;

  static TimeGrid uniform(double t_start, double t_end, std::size_t n) {
    require(n >= 1, "TimeGrid: n_steps must be at least 1");
    require(t_end > t_start, "TimeGrid: t_end must exceed t_start");
    return TimeGrid{t_start, (t_end - t_start) / static_cast<double>(n), 0, n};
  }

  double time(std::size_t local) const { return origin + static_cast<double>(first_step + local) * dt; }
  double t_start() const { return time(0); }
  double t_end() const { return time(n_steps); }
  std::size_t global_step(std::size_t local) const { return first_step + local; }

  TimeGrid window(std::size_t first_local, std::size_t count) const {
    require(first_local + count <= n_steps, "TimeGrid: window exceeds grid");
    return TimeGrid{origin, dt, first_step + first_local, count};
  }

  std::vector<double> nodes() const {
    std::vector<double> t(n_steps + 1);
    for (std::size_t n = 0; n <= n_steps; ++n) t[n] = time(n);
    return t;
  }

  void validate() const {
    require(std::isfinite(dt) && dt > 0.0, "TimeGrid: dt must be positive");
    require(n_steps >= 1, "TimeGrid: n_steps must be at least 1");
  }
};

// Brownian increments keyed by (particle, mode, global step).
struct NoisePlan {
  std::uint64_t seed = 0;
  std::size_t K = 0;

  double increment(std::size_t particle, std::size_t mode, std::size_t step, double dt) const {
    const CounterRng rng(seed, Stream::noise);
    return std::sqrt(dt) * rng.normal(particle, mode, step);
  }
};

// All increments of one grid for M particles, step-major. Reused across Picard
// iterates so the draws are generated once per window.
class NoiseTable {
 public:
  NoiseTable(const NoisePlan& plan, const TimeGrid& grid, std::size_t particles)
      : plan_(plan), grid_(grid), particles_(particles) {
    const auto kk = static_cast<Eigen::Index>(plan.K);
    const auto mm = static_cast<Eigen::Index>(particles);
    steps_.resize(grid.n_steps);
    parallel_for(grid.n_steps, [&](std::size_t n) {
      Eigen::MatrixXd inc(kk, mm);
      for (Eigen::Index i = 0; i < mm; ++i) {
        for (Eigen::Index k = 0; k < kk; ++k) {
          inc(k, i) = plan.increment(static_cast<std::size_t>(i), static_cast<std::size_t>(k), grid.global_step(n),
                                     grid.dt);
        }
      }
      steps_[n] = std::move(inc);
    });
  }

  bool matches(const NoisePlan& plan, const TimeGrid& grid, std::size_t particles) const {
    return plan.seed == plan_.seed && plan.K == plan_.K && grid.first_step == grid_.first_step &&
           grid.n_steps == grid_.n_steps && grid.dt == grid_.dt && particles == particles_;
  }

  const Eigen::MatrixXd& step(std::size_t local) const { return steps_[local]; }

 private:
  NoisePlan plan_;
  TimeGrid grid_;
  std::size_t particles_;
  std::vector<Eigen::MatrixXd> steps_;
};

enum class StepScheme { semi_implicit, drift_implicit };

inline const char* to_string(StepScheme s) {
  return s == StepScheme::semi_implicit ? "semi_implicit" : "drift_implicit";
}

struct IntegratorOptions {
  StepScheme scheme = StepScheme::semi_implicit;
  double inner_tol = 1e-10;
  std::size_t inner_max_iter = 50;
};

struct TrajectoryEnsemble {
  TimeGrid grid;
  std::vector<Ensemble> states;       // one N x M block per node, n_steps + 1 nodes
  std::optional<NoisePlan> noise;
  std::string model_hash;
  double eps = 0.0;
  double lam = 0.0;
  StepScheme scheme = StepScheme::semi_implicit;
  std::string coupling = "frozen";    // frozen | interacting | picard

  std::size_t nodes() const { return states.size(); }
  std::size_t particles() const { return states.empty() ? 0 : static_cast<std::size_t>(states[0].cols()); }
  std::size_t dim() const { return states.empty() ? 0 : static_cast<std::size_t>(states[0].rows()); }
  std::vector<double> times() const { return grid.nodes(); }
  const Ensemble& terminal() const { return states.back(); }

  MeasureFlow law() const {
    std::vector<EmpiricalMeasure> ms;
    ms.reserve(states.size());
    for (const auto& s : states) ms.emplace_back(s);
    return MeasureFlow(times(), std::move(ms));
  }

  bool operator==(const TrajectoryEnsemble& o) const {
    if (states.size() != o.states.size()) return false;
    for (std::size_t n = 0; n < states.size(); ++n) {
      if (states[n].rows() != o.states[n].rows() || states[n].cols() != o.states[n].cols()) return false;
      if (!(states[n].array() == o.states[n].array()).all()) return false;
    }
    return true;
  }
};

namespace detail {

class Stepper {
 public:
  Stepper(const SpectralOperator& op, const ModelSpec& model, double eps, double lam, const TimeGrid& grid,
          const NoisePlan& noise, const IntegratorOptions& opts)
      : op_(op), model_(model), lam_(lam), grid_(grid), noise_(noise), opts_(opts) {
    require(std::isfinite(eps) && eps >= 0.0 && eps < 1.0, "integrator: eps must lie in [0,1)");
    require(std::isfinite(lam) && lam >= 0.0 && lam < 1.0, "integrator: lam must lie in [0,1)");
    require(noise.K == model.noise.K, "integrator: noise plan and model disagree on K");
    require(model.noise.K <= op.size(), "integrator: K exceeds the mode count");
    grid.validate();
    rate_ = op.lambdas().array() + eps;
    denom_ = 1.0 + grid.dt * lam * rate_;
  }

  // One step from node `local` to `local + 1` with the law mu frozen.
  Ensemble step(const Ensemble& x, const EmpiricalMeasure& mu, std::size_t local,
                const Eigen::MatrixXd& increments) const {
    const double dt = grid_.dt;
    const double shift = drift_shift(model_.drift, op_, mu);
    const Ensemble psi = eval_psi_ensemble(model_.drift, op_, x, shift);

    Ensemble noise_part = Ensemble::Zero(x.rows(), x.cols());
    if (model_.noise.K > 0) {
      const NoiseContext ctx = make_noise_context(model_.noise, mu);
      parallel_for(static_cast<std::size_t>(x.cols()), [&](std::size_t ii) {
        const auto i = static_cast<Eigen::Index>(ii);
        for (std::size_t k = 0; k < model_.noise.K; ++k) {
          const auto kk = static_cast<Eigen::Index>(k);
          noise_part(kk, i) = noise_coefficient(model_.noise, op_, ctx, k, x(kk, i)) * increments(kk, i);
        }
      });
    }

    Ensemble next;
    if (opts_.scheme == StepScheme::semi_implicit) {
      next = ((x.array() - dt * (psi.array().colwise() * rate_) + noise_part.array()).colwise() / denom_).matrix();
    } else {
      next = implicit_solve(x, psi, noise_part, shift, local);
    }
    if (!next.allFinite()) {
      throw NumericalAbort("integrator: non-finite state", grid_.global_step(local));
    }
    return next;
  }

  const Eigen::ArrayXd& rate() const { return rate_; }

 private:
  // Solves Y + D Psi(Y) = R by damped Richardson iteration, D = dt a / denom.
  Ensemble implicit_solve(const Ensemble& x, const Ensemble& psi_x, const Ensemble& noise_part, double shift,
                          std::size_t local) const {
    const double dt = grid_.dt;
    const Eigen::ArrayXd d = dt * rate_ / denom_;
    const Eigen::ArrayXXd r = (x.array() + noise_part.array()).colwise() / denom_;
    const double spread = model_.drift.lipschitz() * d.maxCoeff();
    const double omega = 2.0 / (2.0 + spread);
    Eigen::ArrayXXd y = r - psi_x.array().colwise() * d;
    for (std::size_t it = 0; it < opts_.inner_max_iter; ++it) {
      const Ensemble psi = eval_psi_ensemble(model_.drift, op_, y.matrix(), shift);
      const Eigen::ArrayXXd y_new = y - omega * (y + psi.array().colwise() * d - r);
      const double change = (y_new - y).abs().maxCoeff();
      y = y_new;
      if (change <= opts_.inner_tol * (1.0 + y.abs().maxCoeff())) return y.matrix();
    }
    throw NumericalAbort("integrator: inner fixed point did not converge", grid_.global_step(local));
  }

  const SpectralOperator& op_;
  const ModelSpec& model_;
  double lam_;
  TimeGrid grid_;
  NoisePlan noise_;
  IntegratorOptions opts_;
  Eigen::ArrayXd rate_;
  Eigen::ArrayXd denom_;
};

template <typename LawAt>
TrajectoryEnsemble advance(const SpectralOperator& op, const ModelSpec& model, double eps, double lam,
                           const Ensemble& init, const TimeGrid& grid, const NoisePlan& noise,
                           const IntegratorOptions& opts, const NoiseTable* table, LawAt&& law_at) {
  require_dim(op.size(), static_cast<std::size_t>(init.rows()), "integrator");
  require(init.cols() >= 1, "integrator: empty initial ensemble");
  require(init.allFinite(), "integrator: initial ensemble must be finite");
  const Stepper stepper(op, model, eps, lam, grid, noise, opts);
  std::optional<NoiseTable> own;
  if (!table || !table->matches(noise, grid, static_cast<std::size_t>(init.cols()))) {
    own.emplace(noise, grid, static_cast<std::size_t>(init.cols()));
    table = &*own;
  }
  TrajectoryEnsemble out;
  out.grid = grid;
  out.noise = noise;
  out.model_hash = model_hash(model);
  out.eps = eps;
  out.lam = lam;
  out.scheme = opts.scheme;
  out.states.reserve(grid.n_steps + 1);
  out.states.push_back(init);
  for (std::size_t n = 0; n < grid.n_steps; ++n) {
    const Ensemble& x = out.states.back();
    out.states.push_back(stepper.step(x, law_at(n, x), n, table->step(n)));
  }
  return out;
}

}  // namespace detail

// dX = (L - eps)(Psi(X, mu(t)) + lam X) dt + B(X, mu(t)) dW with the law flow
// frozen and read piecewise constant from the left.
inline TrajectoryEnsemble integrate_frozen(const SpectralOperator& op, const ModelSpec& model, double eps, double lam,
                                           const MeasureFlow& flow, const EmpiricalMeasure& init,
                                           const TimeGrid& grid, const NoisePlan& noise,
                                           const IntegratorOptions& opts = {}, const NoiseTable* table = nullptr) {
  require(!flow.empty(), "integrate_frozen: empty flow");
  require(flow.times().front() <= grid.t_start() + 1e-9 * std::max(1.0, std::abs(grid.t_start())),
          "integrate_frozen: flow starts after the grid");
  std::vector<std::size_t> idx(grid.n_steps);
  for (std::size_t n = 0; n < grid.n_steps; ++n) idx[n] = flow.index_at(grid.time(n));
  auto out = detail::advance(op, model, eps, lam, init.particles(), grid, noise, opts, table,
                             [&](std::size_t n, const Ensemble&) -> const EmpiricalMeasure& {
                               return flow.measure(idx[n]);
                             });
  out.coupling = "frozen";
  return out;
}

// Same stepping, but the law at each step is the ensemble's own empirical law.
inline TrajectoryEnsemble integrate_interacting(const SpectralOperator& op, const ModelSpec& model, double eps,
                                                double lam, const EmpiricalMeasure& init, const TimeGrid& grid,
                                                const NoisePlan& noise, const IntegratorOptions& opts = {}) {
  EmpiricalMeasure current;
  auto out = detail::advance(op, model, eps, lam, init.particles(), grid, noise, opts, nullptr,
                             [&](std::size_t, const Ensemble& x) -> const EmpiricalMeasure& {
                               current = EmpiricalMeasure(x);
                               return current;
                             });
  out.coupling = "interacting";
  return out;
}

// Gaussian initial law: coefficient k of particle i is
//   mean * [k == 0] + amplitude * (1 + lambda_k)^{-decay/2} * xi_{ik}
// for k below `modes` (0 means all) and zero above.
struct InitSpec {
  double amplitude = 1.0;
  double decay = 1.0;
  double mean = 0.0;
  std::size_t modes = 0;
};

inline EmpiricalMeasure sample_initial(const SpectralOperator& op, std::size_t particles, const InitSpec& spec,
                                       std::uint64_t seed) {
  require(particles >= 1, "sample_initial: need at least one particle");
  const CounterRng rng(seed, Stream::init);
  const std::size_t active = spec.modes == 0 ? op.size() : std::min(spec.modes, op.size());
  Ensemble x = Ensemble::Zero(op.dim(), static_cast<Eigen::Index>(particles));
  for (std::size_t i = 0; i < particles; ++i) {
    for (std::size_t k = 0; k < active; ++k) {
      const auto kk = static_cast<Eigen::Index>(k);
      x(kk, static_cast<Eigen::Index>(i)) =
          spec.amplitude * std::pow(op.one_plus()[kk], -0.5 * spec.decay) * rng.normal(i, k);
    }
    x(0, static_cast<Eigen::Index>(i)) += spec.mean;
  }
  return EmpiricalMeasure(std::move(x));
}

// Largest explicit step for which the drift part is monotone-safe.
inline double explicit_dt_bound(const SpectralOperator& op, const DriftSpec& d, double eps) {
  const double denom = d.lipschitz() * (op.max_lambda() + eps);
  return denom > 0 ? 1.0 / denom : std::numeric_limits<double>::infinity();
}

struct EnergyReport {
  std::vector<double> residuals;            // per step, ensemble mean
  std::vector<double> drift_work;           // cumulative 2 dt <Psi(X_n), X_n>_2
  std::vector<double> quadratic_variation;  // cumulative sum_k ||B e_k||^2_dual dt
  double max_residual = 0.0;                // max over n of |cumulative residual|
  double max_step_residual = 0.0;
  double delta = 1.0;
  double p_check_max = -std::numeric_limits<double>::infinity();
};

// 2 <Psi(u,mu) - Psi(v,mu), (P - I)(u - v)>_2 with P = (delta - eps)(delta - L)^{-1}.
inline double p_operator_check(const SpectralOperator& op, const DriftSpec& d, double delta, double eps,
                               const Field& u, const Field& v, const EmpiricalMeasure& mu) {
  const Field dpsi = eval_psi(d, op, 0.0, u, mu) - eval_psi(d, op, 0.0, v, mu);
  const Field diff = u - v;
  return 2.0 * dpsi.dot(p_operator(op, delta, eps, diff) - diff);
}

// Replays the discrete Ito identity for ||X||^2_dual along the trajectory:
//   ||X_{n+1}||^2 - ||X_n||^2 = 2 dt <X_n, A_n> + 2 <X_n, S_n> + sum_k ||B e_k||^2 dt + r_n
// with A_n = (L - eps)(Psi + lam X_{n+1}) and S_n the noise increment. The
// defect r_n is what the scheme leaves over. The law at each step comes from
// `flow` when given, else from the trajectory itself.
inline EnergyReport ito_ledger(const TrajectoryEnsemble& traj, const ModelSpec& model, const SpectralOperator& op,
                               const MeasureFlow* flow = nullptr, double delta = 1.0) {
  if (!traj.noise) throw InvalidArgument("ito_ledger: missing noise provenance");
  require(traj.noise->K == model.noise.K, "ito_ledger: noise plan does not match the model");
  require(traj.nodes() == traj.grid.n_steps + 1, "ito_ledger: trajectory and grid disagree");
  const double dt = traj.grid.dt;
  const Eigen::ArrayXd w = op.weights(Space::F12Dual);
  const Eigen::ArrayXd rate = op.lambdas().array() + traj.eps;
  const NoiseTable table(*traj.noise, traj.grid, traj.particles());
  const Field zero = Field::Zero(op.dim());

  EnergyReport rep;
  rep.delta = delta;
  double cum = 0.0, work = 0.0, qv = 0.0;
  for (std::size_t n = 0; n < traj.grid.n_steps; ++n) {
    const Ensemble& x = traj.states[n];
    const Ensemble& y = traj.states[n + 1];
    const EmpiricalMeasure own(x);
    const EmpiricalMeasure& mu = flow ? flow->at(traj.grid.time(n)) : own;
    const double shift = drift_shift(model.drift, op, mu);
    const Ensemble psi_n = eval_psi_ensemble(model.drift, op, x, shift);
    const Ensemble psi = traj.scheme == StepScheme::drift_implicit ? eval_psi_ensemble(model.drift, op, y, shift)
                                                                   : psi_n;
    const Ensemble a = -((psi.array() + traj.lam * y.array()).colwise() * rate).matrix();
    Ensemble s = Ensemble::Zero(x.rows(), x.cols());
    double qv_step = 0.0;
    if (model.noise.K > 0) {
      const NoiseContext ctx = make_noise_context(model.noise, mu);
      const Eigen::MatrixXd& inc = table.step(n);
      for (Eigen::Index i = 0; i < x.cols(); ++i) {
        for (std::size_t k = 0; k < model.noise.K; ++k) {
          const auto kk = static_cast<Eigen::Index>(k);
          const double b = noise_coefficient(model.noise, op, ctx, k, x(kk, i));
          s(kk, i) = b * inc(kk, i);
          qv_step += w[kk] * b * b * dt;
        }
      }
      qv_step /= static_cast<double>(x.cols());
    }
    const Eigen::VectorXd dx_norm =
        column_norms_squared(op, Space::F12Dual, y) - column_norms_squared(op, Space::F12Dual, x);
    const Eigen::VectorXd drift_term =
        2.0 * dt * ((x.array() * a.array()).colwise() * w).colwise().sum().transpose().matrix();
    const Eigen::VectorXd noise_term = 2.0 * ((x.array() * s.array()).colwise() * w).colwise().sum().transpose().matrix();
    const double r = (dx_norm - drift_term - noise_term).mean() - qv_step;
    rep.residuals.push_back(r);
    cum += r;
    rep.max_residual = std::max(rep.max_residual, std::abs(cum));
    rep.max_step_residual = std::max(rep.max_step_residual, std::abs(r));
    work += 2.0 * dt * (psi_n.array() * x.array()).colwise().sum().mean();
    qv += qv_step;
    rep.drift_work.push_back(work);
    rep.quadratic_variation.push_back(qv);

    const Ensemble psi0 = eval_psi_ensemble(model.drift, op, zero, shift);
    for (Eigen::Index i = 0; i < x.cols(); ++i) {
      const Field xi = x.col(i);
      const Field dpsi = psi_n.col(i) - psi0;
      const double val = 2.0 * dpsi.dot(p_operator(op, delta, traj.eps, xi) - xi);
      rep.p_check_max = std::max(rep.p_check_max, val);
    }
  }
  return rep;
}

inline nlohmann::json trajectory_sidecar(const TrajectoryEnsemble& traj) {
  nlohmann::json j{{"model_hash", traj.model_hash},
                   {"grid",
                    {{"origin", traj.grid.origin},
                     {"dt", traj.grid.dt},
                     {"first_step", traj.grid.first_step},
                     {"n_steps", traj.grid.n_steps}}},
                   {"eps", traj.eps},
                   {"lambda", traj.lam},
                   {"scheme", to_string(traj.scheme)},
                   {"coupling", traj.coupling},
                   {"N", traj.dim()},
                   {"M", traj.particles()},
                   {"nodes", traj.nodes()}};
  if (traj.noise) {
    j["noise"] = {{"seed", traj.noise->seed}, {"K", traj.noise->K}};
  } else {
    j["noise"] = nullptr;
  }
  return j;
}

namespace detail {
inline constexpr char kTrajMagic[8] = {'D', 'D', 'S', 'P', 'M', 'E', 'T', 'R'};
}

// Binary: 8-byte tag, u64 N, u64 M, u64 nodes, then each node's N x M block
// column by column. Provenance goes to the JSON sidecar.
inline void write_trajectory(const TrajectoryEnsemble& traj, const std::string& bin_path,
                             const std::string& sidecar_path) {
  std::ofstream out(bin_path, std::ios::binary);
  if (!out) throw Error("cannot open " + bin_path);
  const std::uint64_t n = traj.dim(), m = traj.particles(), nodes = traj.nodes();
  out.write(detail::kTrajMagic, 8);
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(reinterpret_cast<const char*>(&m), sizeof m);
  out.write(reinterpret_cast<const char*>(&nodes), sizeof nodes);
  for (const auto& s : traj.states) {
    out.write(reinterpret_cast<const char*>(s.data()), static_cast<std::streamsize>(n * m * sizeof(double)));
  }
  std::ofstream side(sidecar_path);
  if (!side) throw Error("cannot open " + sidecar_path);
  side << trajectory_sidecar(traj).dump(2) << '\n';
}

inline TrajectoryEnsemble read_trajectory(const std::string& bin_path, const std::string& sidecar_path) {
  std::ifstream in(bin_path, std::ios::binary);
  if (!in) throw Error("cannot open " + bin_path);
  char tag[8];
  std::uint64_t n = 0, m = 0, nodes = 0;
  in.read(tag, 8);
  if (!in || !std::equal(tag, tag + 8, detail::kTrajMagic)) throw Error("read_trajectory: bad header");
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  in.read(reinterpret_cast<char*>(&m), sizeof m);
  in.read(reinterpret_cast<char*>(&nodes), sizeof nodes);
  TrajectoryEnsemble traj;
  for (std::uint64_t i = 0; i < nodes; ++i) {
    Ensemble s(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
    in.read(reinterpret_cast<char*>(s.data()), static_cast<std::streamsize>(n * m * sizeof(double)));
    traj.states.push_back(std::move(s));
  }
  if (!in) throw Error("read_trajectory: truncated data");
  std::ifstream side(sidecar_path);
  if (!side) throw Error("cannot open " + sidecar_path);
  const auto j = nlohmann::json::parse(side);
  traj.model_hash = j.at("model_hash").get<std::string>();
  const auto& g = j.at("grid");
  traj.grid = TimeGrid{g.at("origin").get<double>(), g.at("dt").get<double>(), g.at("first_step").get<std::size_t>(),
                       g.at("n_steps").get<std::size_t>()};
  traj.eps = j.at("eps").get<double>();
  traj.lam = j.at("lambda").get<double>();
  traj.scheme = j.at("scheme").get<std::string>() == "drift_implicit" ? StepScheme::drift_implicit
                                                                      : StepScheme::semi_implicit;
  traj.coupling = j.at("coupling").get<std::string>();
  if (!j.at("noise").is_null()) {
    traj.noise = NoisePlan{j["noise"].at("seed").get<std::uint64_t>(), j["noise"].at("K").get<std::size_t>()};
  }
  return traj;
}

// Per-node ensemble means: |X|_2^2, ||X||^2_dual, ||X||^2_F12 and mode 0.
inline void write_ensemble_stats(const TrajectoryEnsemble& traj, const SpectralOperator& op, const std::string& path) {
  CsvWriter csv(path);
  csv.header({"t", "mean_l2_sq", "mean_dual_sq", "mean_f12_sq", "mean_mode0"});
  for (std::size_t n = 0; n < traj.nodes(); ++n) {
    const Ensemble& x = traj.states[n];
    csv.row(traj.grid.time(n), column_norms_squared(op, Space::L2, x).mean(),
            column_norms_squared(op, Space::F12Dual, x).mean(), column_norms_squared(op, Space::F12, x).mean(),
            x.row(0).mean());
  }
}

}  // namespace ddspme
