#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddspme/measure.hpp"
#include "ddspme/model.hpp"
#include "ddspme/parallel.hpp"
#include "ddspme/rng.hpp"
#include "ddspme/spectral_operator.hpp"

namespace ddspme {

// Random inputs for the hypothesis probes. Every draw is keyed by
// (seed, sample, slot), so reports do not depend on evaluation order.
//
// Samples cycle through three shapes: independent pairs, nearby pairs
// (relative perturbation `nearby`), and pairs that share one measure.
// Amplitudes are log-uniform over [field_scale/30, 10 field_scale] so that
// clipping and plateau regimes of the drift are all visited.
struct ProbeSampler {
  std::uint64_t seed = 0;
  std::size_t measure_size = 4;
  double field_scale = 1.0;
  double nearby = 1e-3;

  double amplitude(std::size_t sample, std::uint64_t slot) const {
    const CounterRng rng(seed, Stream::probe);
    const double e = -1.5 + 2.5 * rng.uniform(sample, slot, 0xA);
    return field_scale * std::pow(10.0, e);
  }

  Field field(const SpectralOperator& op, std::size_t sample, std::uint64_t slot, double amp) const {
    const CounterRng rng(seed, Stream::probe);
    Field u(op.dim());
    for (Eigen::Index k = 0; k < u.size(); ++k) u[k] = amp * rng.normal(sample, slot, static_cast<std::uint64_t>(k));
    return u;
  }

  Field field(const SpectralOperator& op, std::size_t sample, std::uint64_t slot) const {
    return field(op, sample, slot, amplitude(sample, slot));
  }

  EmpiricalMeasure measure(const SpectralOperator& op, std::size_t sample, std::uint64_t slot) const {
    const double amp = amplitude(sample, slot);
    Ensemble x(op.dim(), static_cast<Eigen::Index>(measure_size));
    for (std::size_t j = 0; j < measure_size; ++j) {
      x.col(static_cast<Eigen::Index>(j)) = field(op, sample, slot * 1000 + j + 1, amp);
    }
    return EmpiricalMeasure(std::move(x));
  }

  double scalar(std::size_t sample, std::uint64_t slot) const {
    const CounterRng rng(seed, Stream::probe);
    return amplitude(sample, slot) * rng.normal(sample, slot, 0xB);
  }

  // Perturbation of `base` with relative size `nearby`.
  Field nudge(const SpectralOperator& op, const Field& base, std::size_t sample, std::uint64_t slot) const {
    const double scale = nearby * std::max(base.norm(), 1e-12);
    return base + field(op, sample, slot, scale / std::sqrt(static_cast<double>(op.size())));
  }

  EmpiricalMeasure nudge(const SpectralOperator& op, const EmpiricalMeasure& base, std::size_t sample,
                         std::uint64_t slot) const {
    Ensemble x = base.particles();
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      x.col(j) = nudge(op, Field(x.col(j)), sample, slot * 1000 + static_cast<std::uint64_t>(j) + 1);
    }
    return EmpiricalMeasure(std::move(x));
  }
};

// The sample tuple that realized the worst violation.
struct ProbeWitness {
  std::size_t sample = 0;
  double s = 0.0;
  double r = 0.0;
  Field u;
  Field v;
  EmpiricalMeasure mu;
  EmpiricalMeasure nu;
  double value = 0.0;
};

struct AssumptionReport {
  std::string hypothesis;
  std::size_t samples = 0;
  double worst_violation = -std::numeric_limits<double>::infinity();  // <= 0 means pass
  double estimated_constant = 0.0;
  std::optional<ProbeWitness> witness;

  bool passed() const { return worst_violation <= 0.0; }
};

enum class ProbeMode { diagonal, cross };

namespace detail {
// Differences within this relative size of the compared terms are rounding.
inline double beyond_rounding(double lhs, double rhs) {
  return lhs - rhs - 1e-12 * (std::abs(lhs) + std::abs(rhs));
}

inline double w2_exact(const SpectralOperator& op, const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
  if (mu == nu) return 0.0;
  W2Options o;
  o.method = OtMethod::exact;
  return w2(op, mu, nu, o).value;
}

struct ProbeSample {
  double violation = -std::numeric_limits<double>::infinity();
  double ratio = std::numeric_limits<double>::quiet_NaN();
};

template <typename Eval, typename Build>
AssumptionReport run_probe(const std::string& name, std::size_t n, bool take_max_ratio, Eval&& eval,
                           Build&& build_witness) {
  require(n >= 1, "probe: need at least one sample");
  std::vector<ProbeSample> out(n);
  parallel_for(n, [&](std::size_t i) { out[i] = eval(i); });
  AssumptionReport rep;
  rep.hypothesis = name;
  rep.samples = n;
  std::size_t worst = 0;
  double est = take_max_ratio ? 0.0 : std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    if (out[i].violation > rep.worst_violation) {
      rep.worst_violation = out[i].violation;
      worst = i;
    }
    if (std::isfinite(out[i].ratio)) est = take_max_ratio ? std::max(est, out[i].ratio) : std::min(est, out[i].ratio);
  }
  rep.estimated_constant = est;
  if (rep.worst_violation > 0.0) {
    ProbeWitness w = build_witness(worst);
    w.sample = worst;
    w.value = rep.worst_violation;
    rep.witness = std::move(w);
  }
  return rep;
}

inline double psi_scalar(const DriftSpec& d, const SpectralOperator& op, double r, const EmpiricalMeasure& mu) {
  const double shift = drift_shift(d, op, mu) * op.grid().matrix()(0, 0);
  return d.phi(r - shift);
}
}  // namespace detail

// -(Psi(s, mu) - Psi(r, nu)) (s - r), pointwise.
inline double a1_violation(const DriftSpec& d, const SpectralOperator& op, double s, double r,
                           const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
  const double dpsi = detail::psi_scalar(d, op, s, mu) - detail::psi_scalar(d, op, r, nu);
  return detail::beyond_rounding(0.0, dpsi * (s - r));
}

// |Psi(u,mu) - Psi(v,nu)|_2 - alpha0 (|u - v|_2 + W2(mu, nu)).
inline double a2_violation(const DriftSpec& d, const SpectralOperator& op, double alpha0, const Field& u,
                           const Field& v, const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
  const double lhs = (eval_psi(d, op, 0.0, u, mu) - eval_psi(d, op, 0.0, v, nu)).norm();
  return detail::beyond_rounding(lhs, alpha0 * ((u - v).norm() + detail::w2_exact(op, mu, nu)));
}

// alpha1 |dPsi|^2 - alpha2 W2^2 - alpha3 ||u - v||^2_dual - 2 <dPsi, u - v>_2.
inline double a3_violation(const DriftSpec& d, const SpectralOperator& op, const ModelConstants& k, const Field& u,
                           const Field& v, const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
  const Field dpsi = eval_psi(d, op, 0.0, u, mu) - eval_psi(d, op, 0.0, v, nu);
  const double w = detail::w2_exact(op, mu, nu);
  const double rhs = 2.0 * dpsi.dot(u - v);
  const double lhs = k.alpha1 * dpsi.squaredNorm() - k.alpha2 * w * w - k.alpha3 * norm_squared(op, Space::F12Dual, u - v);
  return detail::beyond_rounding(lhs, rhs);
}

// Hilbert-Schmidt norms of B(u, mu) over the K noise modes.
inline double noise_hs_squared(const NoiseSpec& n, const SpectralOperator& op, const Field& u,
                               const EmpiricalMeasure& mu, Space space) {
  const NoiseContext ctx = make_noise_context(n, mu);
  const Eigen::ArrayXd w = op.weights(space);
  double acc = 0.0;
  for (std::size_t k = 0; k < n.K; ++k) {
    const double b = noise_coefficient(n, op, ctx, k, u[static_cast<Eigen::Index>(k)]);
    acc += w[static_cast<Eigen::Index>(k)] * b * b;
  }
  return acc;
}

inline double noise_diff_hs_squared(const NoiseSpec& n, const SpectralOperator& op, const Field& u, const Field& v,
                                    const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
  const NoiseContext cu = make_noise_context(n, mu);
  const NoiseContext cv = make_noise_context(n, nu);
  const Eigen::ArrayXd w = op.weights(Space::F12Dual);
  double acc = 0.0;
  for (std::size_t k = 0; k < n.K; ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    const double d = noise_coefficient(n, op, cu, k, u[kk]) - noise_coefficient(n, op, cv, k, v[kk]);
    acc += w[kk] * d * d;
  }
  return acc;
}

// ||B(u,mu) - B(v,nu)||^2_HS(dual) - K1 (||u - v||^2_dual + W2^2).
inline double a4_lipschitz_violation(const NoiseSpec& n, const SpectralOperator& op, double K1, const Field& u,
                                     const Field& v, const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
  const double w = detail::w2_exact(op, mu, nu);
  return detail::beyond_rounding(noise_diff_hs_squared(n, op, u, v, mu, nu),
                                 K1 * (norm_squared(op, Space::F12Dual, u - v) + w * w));
}

// ||B(u,mu)||^2_HS(L2) - K2 (1 + |u|_2^2 + mu(||.||^2_dual)).
inline double a4_growth_violation(const NoiseSpec& n, const SpectralOperator& op, double K2, const Field& u,
                                  const EmpiricalMeasure& mu) {
  return detail::beyond_rounding(noise_hs_squared(n, op, u, mu, Space::L2),
                                 K2 * (1.0 + u.squaredNorm() + second_moment(mu, op, Space::F12Dual)));
}

// Sign condition of the drift in the scalar argument. Diagonal mode uses one
// measure for both sides; cross mode draws them independently and places
// every other pair at s = r + 1e-6.
inline AssumptionReport probe_A1(const DriftSpec& d, const SpectralOperator& op, const ProbeSampler& sampler,
                                 std::size_t n, ProbeMode mode = ProbeMode::diagonal) {
  auto draw = [&](std::size_t i, double& s, double& r, EmpiricalMeasure& mu, EmpiricalMeasure& nu) {
    r = sampler.scalar(i, 1);
    s = (mode == ProbeMode::cross && i % 2 == 1) ? r + 1e-6 : sampler.scalar(i, 2);
    mu = sampler.measure(op, i, 3);
    nu = mode == ProbeMode::diagonal ? mu : sampler.measure(op, i, 4);
  };
  return detail::run_probe(
      mode == ProbeMode::diagonal ? "A1-diagonal" : "A1-cross", n, false,
      [&](std::size_t i) {
        double s, r;
        EmpiricalMeasure mu, nu;
        draw(i, s, r, mu, nu);
        detail::ProbeSample out;
        out.violation = a1_violation(d, op, s, r, mu, nu);
        if (s != r) out.ratio = (detail::psi_scalar(d, op, s, mu) - detail::psi_scalar(d, op, r, nu)) / (s - r);
        return out;
      },
      [&](std::size_t i) {
        ProbeWitness w;
        draw(i, w.s, w.r, w.mu, w.nu);
        return w;
      });
}

namespace detail {
inline void draw_pair(const SpectralOperator& op, const ProbeSampler& sampler, std::size_t i, Field& u, Field& v,
                      EmpiricalMeasure& mu, EmpiricalMeasure& nu) {
  u = sampler.field(op, i, 1);
  mu = sampler.measure(op, i, 3);
  switch (i % 3) {
    case 0:
      v = sampler.field(op, i, 2);
      nu = sampler.measure(op, i, 4);
      break;
    case 1:
      v = sampler.nudge(op, u, i, 5);
      nu = sampler.nudge(op, mu, i, 6);
      break;
    default:
      v = sampler.field(op, i, 2);
      nu = mu;
      break;
  }
}

template <typename Eval>
AssumptionReport pair_probe(const std::string& name, const SpectralOperator& op, const ProbeSampler& sampler,
                            std::size_t n, bool take_max, Eval&& eval) {
  return run_probe(
      name, n, take_max,
      [&](std::size_t i) {
        Field u, v;
        EmpiricalMeasure mu, nu;
        draw_pair(op, sampler, i, u, v, mu, nu);
        return eval(u, v, mu, nu);
      },
      [&](std::size_t i) {
        ProbeWitness w;
        draw_pair(op, sampler, i, w.u, w.v, w.mu, w.nu);
        return w;
      });
}
}  // namespace detail

// Lipschitz bound of the drift against the declared alpha0.
// estimated_constant is the largest observed ratio |dPsi| / (|du| + W2).
inline AssumptionReport probe_A2(const DriftSpec& d, const SpectralOperator& op, const ModelConstants& k,
                                 const ProbeSampler& sampler, std::size_t n) {
  require(n >= 2, "probe_A2: need at least two samples");
  auto rep = detail::pair_probe("A2", op, sampler, n, true,
                                [&](const Field& u, const Field& v, const EmpiricalMeasure& mu,
                                    const EmpiricalMeasure& nu) {
                                  detail::ProbeSample s;
                                  const double den = (u - v).norm() + detail::w2_exact(op, mu, nu);
                                  s.violation = a2_violation(d, op, k.alpha0, u, v, mu, nu);
                                  if (den > 0) {
                                    s.ratio = (eval_psi(d, op, 0.0, u, mu) - eval_psi(d, op, 0.0, v, nu)).norm() / den;
                                  }
                                  return s;
                                });
  // Psi vanishes at the origin with the point mass there.
  const Field zero = Field::Zero(op.dim());
  const double at_zero = eval_psi(d, op, 0.0, zero, EmpiricalMeasure::dirac(zero)).norm();
  if (at_zero > rep.worst_violation) {
    rep.worst_violation = at_zero;
    ProbeWitness w;
    w.u = zero;
    w.v = zero;
    w.mu = EmpiricalMeasure::dirac(zero);
    w.nu = w.mu;
    w.value = at_zero;
    w.sample = n;
    if (at_zero > 0) rep.witness = std::move(w);
  }
  return rep;
}

// Cocoercivity-type inequality with the declared alpha1..alpha3.
// estimated_constant is the largest alpha1 consistent with every sample.
inline AssumptionReport probe_A3(const DriftSpec& d, const SpectralOperator& op, const ModelConstants& k,
                                 const ProbeSampler& sampler, std::size_t n) {
  require(k.alpha1 > 0, "probe_A3: alpha1 must be positive");
  return detail::pair_probe("A3", op, sampler, n, false,
                            [&](const Field& u, const Field& v, const EmpiricalMeasure& mu,
                                const EmpiricalMeasure& nu) {
                              detail::ProbeSample s;
                              s.violation = a3_violation(d, op, k, u, v, mu, nu);
                              const Field dpsi = eval_psi(d, op, 0.0, u, mu) - eval_psi(d, op, 0.0, v, nu);
                              const double dd = dpsi.squaredNorm();
                              if (dd > 0) {
                                const double w = detail::w2_exact(op, mu, nu);
                                s.ratio = (2.0 * dpsi.dot(u - v) + k.alpha2 * w * w +
                                           k.alpha3 * norm_squared(op, Space::F12Dual, u - v)) / dd;
                              }
                              return s;
                            });
}

// Lipschitz bound of B in (dual norm, W2) against the declared K1.
inline AssumptionReport probe_A4(const NoiseSpec& ns, const SpectralOperator& op, const ModelConstants& k,
                                 const ProbeSampler& sampler, std::size_t n) {
  require(n >= 2, "probe_A4: need at least two samples");
  return detail::pair_probe("A4", op, sampler, n, true,
                            [&](const Field& u, const Field& v, const EmpiricalMeasure& mu,
                                const EmpiricalMeasure& nu) {
                              detail::ProbeSample s;
                              s.violation = a4_lipschitz_violation(ns, op, k.K1, u, v, mu, nu);
                              const double w = detail::w2_exact(op, mu, nu);
                              const double den = norm_squared(op, Space::F12Dual, u - v) + w * w;
                              if (den > 0) s.ratio = noise_diff_hs_squared(ns, op, u, v, mu, nu) / den;
                              return s;
                            });
}

// Hilbert-Schmidt growth of B against the declared K2.
inline AssumptionReport probe_growth(const NoiseSpec& ns, const SpectralOperator& op, const ModelConstants& k,
                                     const ProbeSampler& sampler, std::size_t n) {
  require(n >= 1, "probe_growth: need at least one sample");
  auto draw = [&](std::size_t i, Field& u, EmpiricalMeasure& mu) {
    u = sampler.field(op, i, 1);
    mu = sampler.measure(op, i, 3);
  };
  return detail::run_probe(
      "A4-growth", n, true,
      [&](std::size_t i) {
        Field u;
        EmpiricalMeasure mu;
        draw(i, u, mu);
        detail::ProbeSample s;
        s.violation = a4_growth_violation(ns, op, k.K2, u, mu);
        s.ratio = noise_hs_squared(ns, op, u, mu, Space::L2) /
                  (1.0 + u.squaredNorm() + second_moment(mu, op, Space::F12Dual));
        return s;
      },
      [&](std::size_t i) {
        ProbeWitness w;
        draw(i, w.u, w.mu);
        return w;
      });
}

inline nlohmann::json to_json(const AssumptionReport& r) {
  nlohmann::json j{{"hypothesis", r.hypothesis},
                   {"samples", r.samples},
                   {"worst_violation", r.worst_violation},
                   {"estimated_constant", r.estimated_constant},
                   {"passed", r.passed()}};
  if (r.witness) {
    const auto& w = *r.witness;
    nlohmann::json wj{{"sample", w.sample}, {"value", w.value}};
    if (w.u.size() > 0) {
      wj["u"] = std::vector<double>(w.u.data(), w.u.data() + w.u.size());
      wj["v"] = std::vector<double>(w.v.data(), w.v.data() + w.v.size());
    } else {
      wj["s"] = w.s;
      wj["r"] = w.r;
    }
    wj["mu"] = measure_to_json(w.mu);
    wj["nu"] = measure_to_json(w.nu);
    j["witness"] = std::move(wj);
  } else {
    j["witness"] = nullptr;
  }
  return j;
}

}  // namespace ddspme
