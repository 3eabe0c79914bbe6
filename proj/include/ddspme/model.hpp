#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddspme/error.hpp"
#include "ddspme/json_util.hpp"
#include "ddspme/measure.hpp"
#include "ddspme/spectral_operator.hpp"

namespace ddspme {

enum class DriftKind { identity, tanh, stefan, power_regularized, custom };
enum class CouplingKind { none, second_moment, mean_shift };

inline const char* to_string(DriftKind k) {
  switch (k) {
    case DriftKind::identity: return "identity";
    case DriftKind::tanh: return "tanh";
    case DriftKind::stefan: return "stefan";
    case DriftKind::power_regularized: return "power_regularized";
    case DriftKind::custom: return "custom";
  }
  return "?";
}

inline const char* to_string(CouplingKind k) {
  switch (k) {
    case CouplingKind::none: return "none";
    case CouplingKind::second_moment: return "second_moment";
    case CouplingKind::mean_shift: return "mean_shift";
  }
  return "?";
}

// Psi(u, mu) = phi(u - kappa * s(mu) * e_0), phi applied pointwise on the grid.
// s is a 1-Lipschitz statistic of mu in the dual-norm W2 metric, so the
// measure dependence costs at most kappa * Lip(phi) in the Lipschitz bound.
struct DriftSpec {
  DriftKind kind = DriftKind::identity;
  double scale = 1.0;        // identity and tanh gain
  double k1 = 1.0;           // stefan slope above the plateau
  double k2 = 1.0;           // stefan slope below the plateau
  double rho = 1.0;          // stefan plateau half-width
  double delta_reg = 0.01;   // stefan plateau slope
  double m = 2.0;            // power exponent
  double r_clip = 1.0;       // power clipping radius
  std::function<double(double)> custom;
  double custom_lipschitz = 1.0;
  CouplingKind coupling = CouplingKind::none;
  double kappa = 0.0;

  bool measure_free() const { return coupling == CouplingKind::none || kappa == 0.0; }

  double phi(double r) const {
    switch (kind) {
      case DriftKind::identity: return scale * r;
      case DriftKind::tanh: return scale * std::tanh(r);
      case DriftKind::stefan:
        if (r > rho) return delta_reg * rho + k1 * (r - rho);
        if (r < -rho) return -delta_reg * rho + k2 * (r + rho);
        return delta_reg * r;
      case DriftKind::power_regularized: {
        const double a = std::abs(r);
        if (a <= r_clip) return std::pow(a, m - 1.0) * r;
        const double edge = std::pow(r_clip, m) + m * std::pow(r_clip, m - 1.0) * (a - r_clip);
        return r > 0 ? edge : -edge;
      }
      case DriftKind::custom:
        if (!custom) throw InvalidArgument("DriftSpec: custom kind without a callable");
        return custom(r);
    }
    throw InvalidArgument("DriftSpec: unknown kind");
  }

  double lipschitz() const {
    switch (kind) {
      case DriftKind::identity:
      case DriftKind::tanh: return std::abs(scale);
      case DriftKind::stefan: return std::max({k1, k2, delta_reg});
      case DriftKind::power_regularized: return m * std::pow(r_clip, m - 1.0);
      case DriftKind::custom: return custom_lipschitz;
    }
    return std::numeric_limits<double>::infinity();
  }

  void validate(Violations& v, const std::string& path = "drift") const {
    if (!std::isfinite(scale) || scale < 0) v.add(path + ".scale: must be finite and nonnegative");
    if (kind == DriftKind::stefan) {
      if (!(k1 >= 0) || !(k2 >= 0)) v.add(path + ": stefan slopes must be nonnegative");
      if (!(rho >= 0)) v.add(path + ".rho: must be nonnegative");
      if (!(delta_reg >= 0)) v.add(path + ".delta_reg: must be nonnegative");
    }
    if (kind == DriftKind::power_regularized) {
      if (!(m > 1)) v.add(path + ".m: power exponent must exceed 1");
      if (!(r_clip > 0)) v.add(path + ".r_clip: must be positive");
    }
    if (kind == DriftKind::custom && !custom) v.add(path + ": custom kind needs a callable");
    if (!std::isfinite(kappa) || kappa < 0) v.add(path + ".coupling.kappa: must be finite and nonnegative");
  }
};

// s(mu) for the drift coupling.
inline double coupling_statistic(const DriftSpec& d, const SpectralOperator& op, const EmpiricalMeasure& mu) {
  switch (d.coupling) {
    case CouplingKind::none: return 0.0;
    case CouplingKind::second_moment: return std::sqrt(second_moment(mu, op, Space::F12Dual));
    case CouplingKind::mean_shift:
      require_dim(op.size(), mu.dim(), "coupling_statistic");
      return mu.particles().row(0).mean() / std::sqrt(op.one_plus()[0]);
  }
  return 0.0;
}

// Psi on every column of x with a precomputed coupling shift kappa * s(mu).
inline Ensemble eval_psi_ensemble(const DriftSpec& d, const SpectralOperator& op, const Ensemble& x,
                                  double shift) {
  require_dim(op.size(), static_cast<std::size_t>(x.rows()), "eval_psi");
  if (d.kind == DriftKind::identity) {
    // phi is linear, so the grid round trip is skipped.
    Ensemble out = d.scale * x;
    if (shift != 0.0) out.row(0).array() -= d.scale * shift;
    return out;
  }
  const GridTransform& g = op.grid();
  Eigen::MatrixXd vals = g.to_grid(x);
  if (shift != 0.0) vals.colwise() -= shift * g.matrix().col(0);
  if (d.kind == DriftKind::tanh) {
    vals = d.scale * vals.array().tanh();
  } else {
    vals = vals.unaryExpr([&d](double r) { return d.phi(r); });
  }
  return g.to_coeffs(vals);
}

inline double drift_shift(const DriftSpec& d, const SpectralOperator& op, const EmpiricalMeasure& mu) {
  if (d.measure_free()) return 0.0;
  return d.kappa * coupling_statistic(d, op, mu);
}

inline Field eval_psi(const DriftSpec& d, const SpectralOperator& op, double /*t*/, const Field& u,
                      const EmpiricalMeasure& mu) {
  require_dim(op.size(), static_cast<std::size_t>(u.size()), "eval_psi");
  require_dim(op.size(), mu.dim(), "eval_psi");
  return eval_psi_ensemble(d, op, u, drift_shift(d, op, mu));
}

enum class NoiseKind { additive, linear, tanh };

inline const char* to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::additive: return "additive";
    case NoiseKind::linear: return "linear";
    case NoiseKind::tanh: return "tanh";
  }
  return "?";
}

// B(u, mu) e_k = sigma_k * mean_{z in mu} h_k(u_k - alpha z_k) e_k for k < K,
// with sigma_k = sigma / (1 + lambda_k) when damped and
//   additive: h = a
//   linear:   h = a + c x
//   tanh:     h = a + b tanh(c x / sqrt(1 + lambda_k)).
struct NoiseSpec {
  std::size_t K = 0;
  NoiseKind kind = NoiseKind::additive;
  double sigma = 0.0;
  double a = 1.0;
  double b = 0.0;
  double c = 1.0;
  double coupling_alpha = 0.0;
  std::size_t mixture_size = 0;  // atoms used in the measure average; 0 means all
  bool damped = true;

  bool affine() const { return kind != NoiseKind::tanh; }
  bool measure_free() const { return coupling_alpha == 0.0 || (kind == NoiseKind::additive); }

  double mode_scale(const SpectralOperator& op, std::size_t k) const {
    return damped ? sigma / op.one_plus()[static_cast<Eigen::Index>(k)] : sigma;
  }

  double h(const SpectralOperator& op, std::size_t k, double x) const {
    switch (kind) {
      case NoiseKind::additive: return a;
      case NoiseKind::linear: return a + c * x;
      case NoiseKind::tanh: return a + b * std::tanh(c * x / std::sqrt(op.one_plus()[static_cast<Eigen::Index>(k)]));
    }
    return 0.0;
  }

  // Lipschitz constant C0 of each base map in the dual norm, summed over modes.
  double base_lipschitz_sq() const {
    switch (kind) {
      case NoiseKind::additive: return 0.0;
      case NoiseKind::linear: return sigma * sigma * c * c;
      case NoiseKind::tanh: return sigma * sigma * b * b * c * c;
    }
    return 0.0;
  }

  // Lipschitz constant of B in (dual norm, W2): 2 C0 max(1, alpha^2).
  double lipschitz_bound() const {
    return 2.0 * base_lipschitz_sq() * std::max(1.0, coupling_alpha * coupling_alpha);
  }

  // K2 with ||B(u,mu)||^2_HS <= K2 (1 + |u|_2^2 + mu(||.||^2_dual)).
  double growth_bound(const SpectralOperator& op) const {
    double sum_sq = 0.0, max_sq = 0.0, max_dual = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double s2 = mode_scale(op, k) * mode_scale(op, k);
      sum_sq += s2;
      max_sq = std::max(max_sq, s2);
      max_dual = std::max(max_dual, s2 * op.one_plus()[static_cast<Eigen::Index>(k)]);
    }
    switch (kind) {
      case NoiseKind::additive: return a * a * sum_sq;
      case NoiseKind::tanh: return (std::abs(a) + std::abs(b)) * (std::abs(a) + std::abs(b)) * sum_sq;
      case NoiseKind::linear:
        return std::max({2.0 * a * a * sum_sq, 4.0 * c * c * max_sq,
                         4.0 * c * c * coupling_alpha * coupling_alpha * max_dual});
    }
    return 0.0;
  }

  void validate(Violations& v, std::size_t n_modes, const std::string& path = "noise") const {
    if (K > n_modes) v.add(path + ".K: exceeds the operator's mode count");
    if (!std::isfinite(sigma) || sigma < 0) v.add(path + ".sigma: must be finite and nonnegative");
    if (!std::isfinite(a) || !std::isfinite(b) || !std::isfinite(c)) v.add(path + ": a, b, c must be finite");
    if (!std::isfinite(coupling_alpha)) v.add(path + ".alpha: must be finite");
  }
};

// Measure summary that B needs at one time step: the atoms used in the
// average, reduced to per-mode means for the affine kinds.
struct NoiseContext {
  Eigen::VectorXd means;   // per mode, affine kinds
  Eigen::MatrixXd atoms;   // K x m, tanh kind
  bool blind = true;
};

inline std::vector<Eigen::Index> mixture_indices(std::size_t m_total, std::size_t mixture_size) {
  const std::size_t m = (mixture_size == 0 || mixture_size >= m_total) ? m_total : mixture_size;
  std::vector<Eigen::Index> idx(m);
  for (std::size_t j = 0; j < m; ++j) idx[j] = static_cast<Eigen::Index>(j * m_total / m);
  return idx;
}

inline NoiseContext make_noise_context(const NoiseSpec& spec, const EmpiricalMeasure& mu) {
  NoiseContext ctx;
  if (spec.coupling_alpha == 0.0 || spec.K == 0) return ctx;
  require(mu.size() >= 1, "eval_noise: empty measure");
  require(spec.K <= mu.dim(), "eval_noise: K exceeds measure dimension");
  ctx.blind = false;
  const auto idx = mixture_indices(mu.size(), spec.mixture_size);
  const auto kk = static_cast<Eigen::Index>(spec.K);
  Eigen::MatrixXd atoms(kk, static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) {
    atoms.col(static_cast<Eigen::Index>(j)) = mu.particles().col(idx[j]).head(kk);
  }
  if (spec.affine()) {
    ctx.means = atoms.rowwise().mean();
  } else {
    ctx.atoms = std::move(atoms);
  }
  return ctx;
}

// Scalar coefficient of e_k in B(u, mu) e_k, given u_k.
inline double noise_coefficient(const NoiseSpec& spec, const SpectralOperator& op, const NoiseContext& ctx,
                                std::size_t k, double uk) {
  const double sk = spec.mode_scale(op, k);
  if (ctx.blind) return sk * spec.h(op, k, uk);
  const double alpha = spec.coupling_alpha;
  const auto kk = static_cast<Eigen::Index>(k);
  if (spec.affine()) return sk * spec.h(op, k, uk - alpha * ctx.means[kk]);
  double acc = 0.0;
  for (Eigen::Index j = 0; j < ctx.atoms.cols(); ++j) acc += spec.h(op, k, uk - alpha * ctx.atoms(kk, j));
  return sk * acc / static_cast<double>(ctx.atoms.cols());
}

inline Field eval_noise(const NoiseSpec& spec, const SpectralOperator& op, double /*t*/, const Field& u,
                        const EmpiricalMeasure& mu, std::size_t k) {
  require(k < spec.K, "eval_noise: mode index out of range");
  require(mu.size() >= 1, "eval_noise: empty measure");
  require_dim(op.size(), static_cast<std::size_t>(u.size()), "eval_noise");
  Field out = Field::Zero(u.size());
  const NoiseContext ctx = make_noise_context(spec, mu);
  out[static_cast<Eigen::Index>(k)] = noise_coefficient(spec, op, ctx, k, u[static_cast<Eigen::Index>(k)]);
  return out;
}

// Declared hypothesis constants. f_bound stands in for the forcing process.
struct ModelConstants {
  double alpha0 = 1.0;
  double alpha1 = 1.0;
  double alpha2 = 0.0;
  double alpha3 = 0.0;
  double K1 = 0.0;
  double K2 = 0.0;
  double c = 1.0;
  double delta = 1.0;
  double alpha_coer = 2.0;
  double f_bound = 0.0;

  // Scales every upper-bound constant; alpha1, delta and alpha_coer are
  // lower bounds or exponents and stay fixed.
  ModelConstants scaled(double factor) const {
    ModelConstants out = *this;
    for (double* p : {&out.alpha0, &out.alpha2, &out.alpha3, &out.K1, &out.K2, &out.c, &out.f_bound}) *p *= factor;
    return out;
  }

  void validate(Violations& v, const std::string& path = "constants") const {
    for (auto [name, val] : {std::pair{"alpha0", alpha0}, {"alpha2", alpha2}, {"alpha3", alpha3}, {"K1", K1},
                             {"K2", K2}, {"f_bound", f_bound}}) {
      if (!std::isfinite(val) || val < 0) v.add(path + "." + name + ": must be finite and nonnegative");
    }
    if (!(alpha1 > 0) || !std::isfinite(alpha1)) v.add(path + ".alpha1: must be positive");
    if (!(delta > 0) || !std::isfinite(delta)) v.add(path + ".delta: must be positive");
    if (!(alpha_coer > 1) || !std::isfinite(alpha_coer)) v.add(path + ".alpha_coer: must exceed 1");
    if (!std::isfinite(c)) v.add(path + ".c: must be finite");
  }
};

// Constants that the built-in drift and noise satisfy by construction.
inline ModelConstants derived_constants(const DriftSpec& d, const NoiseSpec& n, const SpectralOperator& op) {
  ModelConstants k;
  const double lip = d.lipschitz();
  const double kappa = d.measure_free() ? 0.0 : d.kappa;
  k.alpha0 = lip * std::max(1.0, kappa);
  k.alpha1 = lip > 0 ? 1.0 / lip : 1.0;
  k.alpha2 = lip * kappa * kappa;
  k.alpha3 = 0.0;
  k.K1 = n.lipschitz_bound();
  k.K2 = n.growth_bound(op);
  return k;
}

struct ModelSpec {
  DriftSpec drift;
  NoiseSpec noise;
  ModelConstants constants;

  bool measure_free() const { return drift.measure_free() && noise.measure_free(); }
};

inline nlohmann::json to_json(const DriftSpec& d) {
  nlohmann::json j{{"kind", to_string(d.kind)},
                   {"coupling", {{"kind", to_string(d.coupling)}, {"kappa", d.kappa}}}};
  switch (d.kind) {
    case DriftKind::identity:
    case DriftKind::tanh: j["scale"] = d.scale; break;
    case DriftKind::stefan:
      j["k1"] = d.k1;
      j["k2"] = d.k2;
      j["rho"] = d.rho;
      j["delta_reg"] = d.delta_reg;
      break;
    case DriftKind::power_regularized:
      j["m"] = d.m;
      j["r_clip"] = d.r_clip;
      break;
    case DriftKind::custom: j["lipschitz"] = d.custom_lipschitz; break;
  }
  return j;
}

inline nlohmann::json to_json(const NoiseSpec& n) {
  return {{"K", n.K},         {"kind", to_string(n.kind)}, {"sigma", n.sigma},
          {"a", n.a},         {"b", n.b},                  {"c", n.c},
          {"alpha", n.coupling_alpha}, {"mixture_size", n.mixture_size}, {"damped", n.damped}};
}

inline nlohmann::json to_json(const ModelConstants& k) {
  return {{"alpha0", k.alpha0}, {"alpha1", k.alpha1}, {"alpha2", k.alpha2}, {"alpha3", k.alpha3},
          {"K1", k.K1},         {"K2", k.K2},         {"c", k.c},           {"delta", k.delta},
          {"alpha_coer", k.alpha_coer}, {"f_bound", k.f_bound}};
}

inline nlohmann::json to_json(const ModelSpec& m) {
  return {{"drift", to_json(m.drift)}, {"noise", to_json(m.noise)}, {"constants", to_json(m.constants)}};
}

inline DriftSpec drift_from_json(const nlohmann::json& j, Violations& v, const std::string& path = "drift") {
  DriftSpec d;
  ObjectReader r(j, path, v);
  const auto kind = r.required<std::string>("kind", "identity");
  if (kind == "identity") d.kind = DriftKind::identity;
  else if (kind == "tanh") d.kind = DriftKind::tanh;
  else if (kind == "stefan") d.kind = DriftKind::stefan;
  else if (kind == "power_regularized") d.kind = DriftKind::power_regularized;
  else if (kind == "custom") v.add(path + ".kind: custom drift needs a C++ callable and cannot come from JSON");
  else v.add(path + ".kind: unknown drift kind '" + kind + "'");
  d.scale = r.get<double>("scale", d.scale);
  d.k1 = r.get<double>("k1", d.k1);
  d.k2 = r.get<double>("k2", d.k2);
  d.rho = r.get<double>("rho", d.rho);
  d.delta_reg = r.get<double>("delta_reg", d.delta_reg);
  d.m = r.get<double>("m", d.m);
  d.r_clip = r.get<double>("r_clip", d.r_clip);
  if (const auto* cj = r.raw("coupling")) {
    ObjectReader cr(*cj, path + ".coupling", v);
    const auto ck = cr.get<std::string>("kind", "none");
    if (ck == "none") d.coupling = CouplingKind::none;
    else if (ck == "second_moment") d.coupling = CouplingKind::second_moment;
    else if (ck == "mean_shift") d.coupling = CouplingKind::mean_shift;
    else v.add(path + ".coupling.kind: unknown coupling '" + ck + "'");
    d.kappa = cr.get<double>("kappa", 0.0);
    cr.finish();
  }
  r.finish();
  d.validate(v, path);
  return d;
}

inline NoiseSpec noise_from_json(const nlohmann::json& j, Violations& v, std::size_t n_modes,
                                 const std::string& path = "noise") {
  NoiseSpec n;
  ObjectReader r(j, path, v);
  n.K = r.get<std::size_t>("K", std::min<std::size_t>(n_modes, 16));
  const auto kind = r.get<std::string>("kind", "additive");
  if (kind == "additive") n.kind = NoiseKind::additive;
  else if (kind == "linear") n.kind = NoiseKind::linear;
  else if (kind == "tanh") n.kind = NoiseKind::tanh;
  else v.add(path + ".kind: unknown noise kind '" + kind + "'");
  n.sigma = r.get<double>("sigma", n.sigma);
  n.a = r.get<double>("a", n.a);
  n.b = r.get<double>("b", n.b);
  n.c = r.get<double>("c", n.c);
  n.coupling_alpha = r.get<double>("alpha", n.coupling_alpha);
  n.mixture_size = r.get<std::size_t>("mixture_size", n.mixture_size);
  n.damped = r.get<bool>("damped", n.damped);
  r.finish();
  n.validate(v, n_modes, path);
  return n;
}

inline ModelConstants constants_from_json(const nlohmann::json& j, Violations& v,
                                          const std::string& path = "constants") {
  ModelConstants k;
  ObjectReader r(j, path, v);
  k.alpha0 = r.required<double>("alpha0", k.alpha0);
  k.alpha1 = r.required<double>("alpha1", k.alpha1);
  k.alpha2 = r.required<double>("alpha2", k.alpha2);
  k.alpha3 = r.required<double>("alpha3", k.alpha3);
  k.K1 = r.required<double>("K1", k.K1);
  k.K2 = r.required<double>("K2", k.K2);
  k.c = r.required<double>("c", k.c);
  k.delta = r.get<double>("delta", k.delta);
  k.alpha_coer = r.get<double>("alpha_coer", k.alpha_coer);
  k.f_bound = r.get<double>("f_bound", k.f_bound);
  r.finish();
  k.validate(v, path);
  return k;
}

inline ModelSpec model_from_json(const nlohmann::json& j, Violations& v, std::size_t n_modes,
                                 const std::string& path = "model") {
  ModelSpec m;
  ObjectReader r(j, path, v);
  if (const auto* d = r.raw("drift")) m.drift = drift_from_json(*d, v, path + ".drift");
  else v.add(path + ".drift: required key missing");
  if (const auto* n = r.raw("noise")) m.noise = noise_from_json(*n, v, n_modes, path + ".noise");
  else m.noise.K = 0;
  if (const auto* k = r.raw("constants")) m.constants = constants_from_json(*k, v, path + ".constants");
  else v.add(path + ".constants: required key missing");
  r.finish();
  return m;
}

inline ModelSpec model_from_json(const nlohmann::json& j, std::size_t n_modes) {
  Violations v;
  ModelSpec m = model_from_json(j, v, n_modes);
  v.throw_if_any("model JSON");
  return m;
}

// Stable identifier of a model: FNV-1a of its canonical JSON.
inline std::string model_hash(const ModelSpec& m) { return hex64(fnv1a(to_json(m).dump())); }

}  // namespace ddspme
