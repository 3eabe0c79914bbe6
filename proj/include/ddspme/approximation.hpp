#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddspme/csv.hpp"
#include "ddspme/error.hpp"
#include "ddspme/fixed_point.hpp"
#include "ddspme/integrator.hpp"
#include "ddspme/model.hpp"
#include "ddspme/parallel.hpp"
#include "ddspme/rng.hpp"
#include "ddspme/spectral_operator.hpp"

namespace ddspme {

// Per particle: max over grid nodes of ||X_a - X_b||^2_dual.
inline Eigen::VectorXd path_gap_per_particle(const SpectralOperator& op, const TrajectoryEnsemble& a,
                                             const TrajectoryEnsemble& b) {
  require(a.nodes() == b.nodes() && a.particles() == b.particles(), "path_gap: trajectories differ in shape");
  Eigen::VectorXd sup = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(a.particles()));
  for (std::size_t n = 0; n < a.nodes(); ++n) {
    sup = sup.cwiseMax(column_norms_squared(op, Space::F12Dual, a.states[n] - b.states[n]));
  }
  return sup;
}

// Half-width of the central 95% interval of the bootstrap mean.
inline double bootstrap_half_width(const Eigen::VectorXd& values, std::size_t resamples, std::uint64_t seed) {
  const auto m = static_cast<std::size_t>(values.size());
  if (m < 2 || resamples < 2) return 0.0;
  const CounterRng rng(seed, Stream::bootstrap);
  std::vector<double> means(resamples);
  for (std::size_t b = 0; b < resamples; ++b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const auto j = static_cast<Eigen::Index>(rng.bits(b, i) % m);
      acc += values[j];
    }
    means[b] = acc / static_cast<double>(m);
  }
  std::sort(means.begin(), means.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(resamples - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, resamples - 1);
    return means[lo] + (pos - static_cast<double>(lo)) * (means[hi] - means[lo]);
  };
  return 0.5 * (q(0.975) - q(0.025));
}

struct SweepRow {
  double param = 0.0;
  double param_tilde = 0.0;
  double gap = 0.0;  // ensemble mean of the sup-in-time squared dual gap
  double ci = 0.0;   // bootstrap half-width of that mean
};

struct SweepTable {
  std::string parameter = "lambda";
  std::vector<SweepRow> rows;
  double slope = std::numeric_limits<double>::quiet_NaN();
  double intercept = std::numeric_limits<double>::quiet_NaN();
  std::size_t fit_points = 0;
};

// Least squares of log(gap) against log(param + param_tilde) over rows with a
// positive gap and distinct parameters. Fewer than 4 such rows leave the
// slope undefined.
inline void fit_slope(SweepTable& t) {
  std::vector<double> xs, ys;
  for (const auto& r : t.rows) {
    if (r.gap > 0.0 && r.param != r.param_tilde) {
      xs.push_back(std::log(r.param + r.param_tilde));
      ys.push_back(std::log(r.gap));
    }
  }
  t.fit_points = xs.size();
  if (xs.size() < 4) {
    t.slope = t.intercept = std::numeric_limits<double>::quiet_NaN();
    return;
  }
  const double n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  t.slope = sxx > 0 ? sxy / sxx : std::numeric_limits<double>::quiet_NaN();
  t.intercept = my - t.slope * mx;
}

struct SweepSetup {
  double T = 1.0;
  std::size_t n_steps = 100;
  PicardConfig picard;
  IntegratorOptions integrator;
  std::size_t bootstrap_resamples = 1000;
  std::uint64_t bootstrap_seed = 0;
};

namespace detail {
template <typename RunAt>
SweepTable sweep(const std::string& name, const SpectralOperator& op, const std::vector<double>& values,
                 const SweepSetup& setup, RunAt&& run_at) {
  std::vector<double> distinct = values;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  require(distinct.size() >= 3, name + "_sweep: need at least 3 distinct values");
  for (double v : distinct) require(v > 0.0 && v < 1.0, name + "_sweep: values must lie in (0,1)");

  // Independent cells; results land in fixed slots, merged in value order.
  std::vector<TrajectoryEnsemble> runs(distinct.size());
  parallel_for(distinct.size(), [&](std::size_t i) { runs[i] = run_at(distinct[i]); });
  auto run_of = [&](double v) -> const TrajectoryEnsemble& {
    return runs[static_cast<std::size_t>(std::lower_bound(distinct.begin(), distinct.end(), v) - distinct.begin())];
  };

  SweepTable table;
  table.parameter = name;
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::size_t j = i + 1; j < values.size(); ++j) {
      const Eigen::VectorXd g = path_gap_per_particle(op, run_of(values[i]), run_of(values[j]));
      SweepRow row;
      row.param = values[i];
      row.param_tilde = values[j];
      row.gap = g.mean();
      row.ci = bootstrap_half_width(g, setup.bootstrap_resamples, setup.bootstrap_seed + i * 1315423911ULL + j);
      table.rows.push_back(row);
    }
  }
  fit_slope(table);
  return table;
}
}  // namespace detail

// Viscosity chain: solve() at each lambda with eps fixed, common noise and
// initial ensemble; rows for every pair of listed values.
inline SweepTable lambda_sweep(const SpectralOperator& op, const ModelSpec& model, double eps,
                               const std::vector<double>& lambdas, const EmpiricalMeasure& init,
                               const NoisePlan& noise, const SweepSetup& setup) {
  return detail::sweep("lambda", op, lambdas, setup, [&](double lam) {
    return solve(op, model, eps, lam, init, setup.T, setup.n_steps, setup.picard, noise, setup.integrator).trajectory;
  });
}

// Regularization chain in eps with lambda = 0.
inline SweepTable epsilon_sweep(const SpectralOperator& op, const ModelSpec& model,
                                const std::vector<double>& epsilons, const EmpiricalMeasure& init,
                                const NoisePlan& noise, const SweepSetup& setup) {
  return detail::sweep("epsilon", op, epsilons, setup, [&](double eps) {
    return solve(op, model, eps, 0.0, init, setup.T, setup.n_steps, setup.picard, noise, setup.integrator).trajectory;
  });
}

inline void write_sweep_csv(const SweepTable& t, const std::string& path) {
  CsvWriter csv(path);
  csv.header({t.parameter, t.parameter + "_tilde", "gap", "slope", "ci"});
  for (const auto& r : t.rows) csv.row(r.param, r.param_tilde, r.gap, t.slope, r.ci);
}

inline SweepTable read_sweep_csv(const std::string& path) {
  const auto rows = read_csv(path);
  require(!rows.empty() && rows[0].size() == 5, "read_sweep_csv: bad header");
  SweepTable t;
  t.parameter = rows[0][0];
  for (std::size_t i = 1; i < rows.size(); ++i) {
    require(rows[i].size() == 5, "read_sweep_csv: bad row");
    t.rows.push_back({parse_double(rows[i][0]), parse_double(rows[i][1]), parse_double(rows[i][2]),
                      parse_double(rows[i][4])});
    t.slope = parse_double(rows[i][3]);
  }
  return t;
}

inline nlohmann::json to_json(const SweepTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{t.parameter, r.param}, {t.parameter + "_tilde", r.param_tilde}, {"gap", r.gap}, {"ci", r.ci}});
  }
  return {{"parameter", t.parameter},
          {"slope", std::isfinite(t.slope) ? nlohmann::json(t.slope) : nlohmann::json(nullptr)},
          {"intercept", std::isfinite(t.intercept) ? nlohmann::json(t.intercept) : nlohmann::json(nullptr)},
          {"fit_points", t.fit_points},
          {"rows", rows}};
}

struct BoundEntry {
  std::string name;
  double measured = 0.0;
  double envelope = 0.0;
  bool pass = false;
};

struct BoundReport {
  std::vector<BoundEntry> bounds;
  double eps = 0.0;
  double lam = 0.0;
  double horizon = 0.0;

  bool all_pass() const {
    return std::all_of(bounds.begin(), bounds.end(), [](const BoundEntry& b) { return b.pass; });
  }
  const BoundEntry& at(const std::string& name) const {
    for (const auto& b : bounds) {
      if (b.name == name) return b;
    }
    throw InvalidArgument("BoundReport: no bound named " + name);
  }
};

// Envelopes assembled from the declared constants:
//   sup_l2, sup_l2_viscous: (2 E|X0|_2^2 + 2 K2 T) e^{(2 + 2 K2) T}
//   energy:  (E||X0||^2_dual + 2 K2 T) e^{C T}, C = alpha2 + alpha3 + 4 K1 + 1/eps0
//   gronwall: 2 (E||X0||^2_dual + f_bound T) e^{4 max(c,0) T}
// with eps0 = alpha1 / 2. The measured side of `energy` is
// E||X(T)||^2_dual + (alpha1 - eps0) E int |Psi|_2^2.
inline BoundReport apriori_check(const TrajectoryEnsemble& traj, const ModelSpec& model, const SpectralOperator& op,
                                 const ModelConstants& constants) {
  require(traj.nodes() >= 2, "apriori_check: trajectory needs at least one step");
  require(!traj.model_hash.empty(), "apriori_check: trajectory lacks provenance");
  const double dt = traj.grid.dt;
  const double T = traj.grid.t_end() - traj.grid.t_start();
  const ModelConstants& k = constants;
  const double eps0 = 0.5 * k.alpha1;

  Eigen::VectorXd sup_l2 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(traj.particles()));
  Eigen::VectorXd sup_dual = sup_l2;
  double int_f12 = 0.0, int_psi = 0.0;
  for (std::size_t n = 0; n < traj.nodes(); ++n) {
    const Ensemble& x = traj.states[n];
    sup_l2 = sup_l2.cwiseMax(column_norms_squared(op, Space::L2, x));
    sup_dual = sup_dual.cwiseMax(column_norms_squared(op, Space::F12Dual, x));
    if (n + 1 < traj.nodes()) {
      int_f12 += dt * column_norms_squared(op, Space::F12, x).mean();
      const EmpiricalMeasure mu(x);
      const Ensemble psi = eval_psi_ensemble(model.drift, op, x, drift_shift(model.drift, op, mu));
      int_psi += dt * psi.colwise().squaredNorm().mean();
    }
  }
  const double x0_l2 = column_norms_squared(op, Space::L2, traj.states.front()).mean();
  const double x0_dual = column_norms_squared(op, Space::F12Dual, traj.states.front()).mean();
  const double xT_dual = column_norms_squared(op, Space::F12Dual, traj.states.back()).mean();

  const double env33 = (2.0 * x0_l2 + 2.0 * k.K2 * T) * std::exp((2.0 + 2.0 * k.K2) * T);
  const double c24 = k.alpha2 + k.alpha3 + 4.0 * k.K1 + 1.0 / eps0;
  const double env24 = (x0_dual + 2.0 * k.K2 * T) * std::exp(c24 * T);
  const double env31 = 2.0 * (x0_dual + k.f_bound * T) * std::exp(4.0 * std::max(k.c, 0.0) * T);

  BoundReport rep;
  rep.eps = traj.eps;
  rep.lam = traj.lam;
  rep.horizon = T;
  auto add = [&](const std::string& name, double measured, double envelope) {
    rep.bounds.push_back({name, measured, envelope, measured <= envelope});
  };
  add("sup_l2", sup_l2.mean(), env33);
  add("sup_l2_viscous", sup_l2.mean() + 4.0 * traj.lam * int_f12, env33);
  add("energy", xT_dual + (k.alpha1 - eps0) * int_psi, env24);
  add("gronwall", sup_dual.mean(), env31);
  return rep;
}

inline nlohmann::json to_json(const BoundReport& r) {
  nlohmann::json b = nlohmann::json::array();
  for (const auto& e : r.bounds) {
    b.push_back({{"name", e.name},
                 {"measured", e.measured},
                 {"envelope", e.envelope},
                 {"ratio", e.envelope > 0 ? e.measured / e.envelope : std::numeric_limits<double>::infinity()},
                 {"pass", e.pass}});
  }
  return {{"eps", r.eps}, {"lambda", r.lam}, {"T", r.horizon}, {"all_pass", r.all_pass()}, {"bounds", b}};
}

}  // namespace ddspme
