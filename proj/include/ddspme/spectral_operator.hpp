#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ddspme/error.hpp"

namespace ddspme {

// A state in spectral coordinates: coefficient k multiplies the k-th
// eigenfunction of L.
using Field = Eigen::VectorXd;

// Ensembles store one particle per column.
using Ensemble = Eigen::MatrixXd;

enum class Space { L2, F12, F12Dual };

inline const char* to_string(Space s) {
  switch (s) {
    case Space::L2: return "L2";
    case Space::F12: return "F12";
    case Space::F12Dual: return "F12dual";
  }
  return "?";
}

// Exponent of the scale (1 - L)^s.
struct SobolevScale {
  double s = 0.0;
};

// Orthogonal map between grid values on the 1-D torus and coefficients in the
// real Fourier basis, ordered 1, cos x, sin x, cos 2x, sin 2x, ...
class GridTransform {
 public:
  explicit GridTransform(std::size_t n) : q_(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)) {
    const double nn = static_cast<double>(n);
    for (std::size_t m = 0; m < n; ++m) {
      const double x = 2.0 * std::numbers::pi * static_cast<double>(m) / nn;
      const auto row = static_cast<Eigen::Index>(m);
      q_(row, 0) = 1.0 / std::sqrt(nn);
      for (std::size_t k = 1; k < n; ++k) {
        const std::size_t j = (k + 1) / 2;
        const auto col = static_cast<Eigen::Index>(k);
        if (2 * j == n) {
          q_(row, col) = (m % 2 == 0 ? 1.0 : -1.0) / std::sqrt(nn);
        } else if (k % 2 == 1) {
          q_(row, col) = std::sqrt(2.0 / nn) * std::cos(static_cast<double>(j) * x);
        } else {
          q_(row, col) = std::sqrt(2.0 / nn) * std::sin(static_cast<double>(j) * x);
        }
      }
    }
  }

  // Columns are the basis functions sampled on the grid.
  const Eigen::MatrixXd& matrix() const { return q_; }

  Eigen::MatrixXd to_grid(const Eigen::MatrixXd& coeffs) const { return q_ * coeffs; }
  Eigen::MatrixXd to_coeffs(const Eigen::MatrixXd& values) const { return q_.transpose() * values; }

 private:
  Eigen::MatrixXd q_;
};

// Diagonal model of L: L e_k = -lambda_k e_k.
class SpectralOperator {
 public:
  SpectralOperator(std::vector<double> lambdas, std::string label = "explicit")
      : label_(std::move(label)) {
    require(!lambdas.empty(), "SpectralOperator: N must be at least 1");
    lambdas_.resize(static_cast<Eigen::Index>(lambdas.size()));
    for (std::size_t k = 0; k < lambdas.size(); ++k) {
      require(std::isfinite(lambdas[k]) && lambdas[k] >= 0.0,
              "SpectralOperator: eigenvalues of -L must be finite and nonnegative");
      lambdas_[static_cast<Eigen::Index>(k)] = lambdas[k];
    }
    one_plus_ = 1.0 + lambdas_.array();
  }

  std::size_t size() const { return static_cast<std::size_t>(lambdas_.size()); }
  Eigen::Index dim() const { return lambdas_.size(); }
  double lambda(std::size_t k) const { return lambdas_[static_cast<Eigen::Index>(k)]; }
  const Eigen::VectorXd& lambdas() const { return lambdas_; }
  const std::string& label() const { return label_; }
  double max_lambda() const { return lambdas_.maxCoeff(); }

  // Per-mode weight w_k with ||u||^2 = sum w_k u_k^2 in the given space.
  Eigen::ArrayXd weights(Space space) const {
    switch (space) {
      case Space::L2: return Eigen::ArrayXd::Ones(dim());
      case Space::F12: return one_plus_;
      case Space::F12Dual: return one_plus_.inverse();
    }
    return Eigen::ArrayXd::Ones(dim());
  }

  // 1 + lambda_k, cached.
  const Eigen::ArrayXd& one_plus() const { return one_plus_; }

  const GridTransform& grid() const {
    std::call_once(grid_once_->flag, [this] { grid_once_->value = std::make_shared<GridTransform>(size()); });
    return *grid_once_->value;
  }

 private:
  struct LazyGrid {
    std::once_flag flag;
    std::shared_ptr<GridTransform> value;
  };
  Eigen::VectorXd lambdas_;
  Eigen::ArrayXd one_plus_;
  std::string label_;
  std::shared_ptr<LazyGrid> grid_once_ = std::make_shared<LazyGrid>();
};

// Frequency of mode k on the torus: 0, 1, 1, 2, 2, ...
inline double torus_frequency(std::size_t k) { return static_cast<double>((k + 1) / 2); }

inline SpectralOperator make_fractional_laplacian(
    std::size_t n, double alpha,
    const std::function<double(std::size_t)>& base_frequencies = torus_frequency) {
  require(n >= 1, "make_fractional_laplacian: N must be at least 1");
  require(std::isfinite(alpha) && alpha > 0.0 && alpha <= 1.0,
          "make_fractional_laplacian: alpha outside (0,1]");
  std::vector<double> lam(n);
  for (std::size_t k = 0; k < n; ++k) lam[k] = std::pow(std::abs(base_frequencies(k)), 2.0 * alpha);
  return SpectralOperator(std::move(lam), "fractional_laplacian(alpha=" + std::to_string(alpha) + ")");
}

inline Field scale_apply(const SpectralOperator& op, SobolevScale s, const Field& u) {
  require_dim(op.size(), static_cast<std::size_t>(u.size()), "scale_apply");
  if (s.s == 0.0) return u;
  return (op.one_plus().pow(s.s) * u.array()).matrix();
}

inline double inner(const SpectralOperator& op, Space space, const Field& u, const Field& v) {
  require_dim(op.size(), static_cast<std::size_t>(u.size()), "inner");
  require_dim(op.size(), static_cast<std::size_t>(v.size()), "inner");
  switch (space) {
    case Space::L2: return u.dot(v);
    case Space::F12: return (op.one_plus() * u.array() * v.array()).sum();
    case Space::F12Dual: return (u.array() * v.array() / op.one_plus()).sum();
  }
  return 0.0;
}

inline double norm_squared(const SpectralOperator& op, Space space, const Field& u) {
  return inner(op, space, u, u);
}

inline double norm(const SpectralOperator& op, Space space, const Field& u) {
  return std::sqrt(norm_squared(op, space, u));
}

// Squared norm of each column.
inline Eigen::VectorXd column_norms_squared(const SpectralOperator& op, Space space, const Ensemble& x) {
  require_dim(op.size(), static_cast<std::size_t>(x.rows()), "column_norms_squared");
  const Eigen::ArrayXd w = op.weights(space);
  return (x.array().square().colwise() * w).colwise().sum().transpose();
}

inline Field semigroup(const SpectralOperator& op, double t, const Field& u) {
  require(std::isfinite(t) && t >= 0.0, "semigroup: t must be nonnegative");
  require_dim(op.size(), static_cast<std::size_t>(u.size()), "semigroup");
  return ((-t * op.lambdas().array()).exp() * u.array()).matrix();
}

// sqrt(delta) (delta - L)^{-1/2} u
inline Field resolvent_sqrt(const SpectralOperator& op, double delta, const Field& u) {
  require(delta > 0.0, "resolvent_sqrt: delta must be positive");
  require_dim(op.size(), static_cast<std::size_t>(u.size()), "resolvent_sqrt");
  return (std::sqrt(delta) * (delta + op.lambdas().array()).rsqrt() * u.array()).matrix();
}

// (delta - eps) (delta - L)^{-1} u
inline Field p_operator(const SpectralOperator& op, double delta, double eps, const Field& u) {
  require(delta > 0.0, "p_operator: delta must be positive");
  require_dim(op.size(), static_cast<std::size_t>(u.size()), "p_operator");
  return ((delta - eps) / (delta + op.lambdas().array()) * u.array()).matrix();
}

// Nodes and normalized weights (summing to 1) of the Gauss rule for the
// weight x^a e^{-x} on (0, inf), via the Golub-Welsch eigenproblem.
struct GaussRule {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;
};

inline GaussRule gauss_laguerre(std::size_t n, double a) {
  require(n >= 1, "gauss_laguerre: need at least one node");
  require(a > -1.0, "gauss_laguerre: exponent must exceed -1");
  const auto nn = static_cast<Eigen::Index>(n);
  Eigen::VectorXd diag(nn), sub(std::max<Eigen::Index>(nn - 1, 1));
  for (Eigen::Index i = 0; i < nn; ++i) diag[i] = 2.0 * static_cast<double>(i) + a + 1.0;
  for (Eigen::Index i = 1; i < nn; ++i) {
    const double di = static_cast<double>(i);
    sub[i - 1] = std::sqrt(di * (di + a));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  es.computeFromTridiagonal(diag, sub.head(nn - 1), Eigen::ComputeEigenvectors);
  if (es.info() != Eigen::Success) throw Error("gauss_laguerre: eigensolver failed");
  GaussRule rule;
  rule.nodes = es.eigenvalues();
  rule.weights = es.eigenvectors().row(0).transpose().array().square();
  return rule;
}

namespace detail {
inline const GaussRule& cached_laguerre(std::size_t n, double a) {
  static std::mutex mutex;
  static std::map<std::pair<std::size_t, double>, GaussRule> cache;
  std::lock_guard lock(mutex);
  auto key = std::make_pair(n, a);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, gauss_laguerre(n, a)).first;
  return it->second;
}
}  // namespace detail

struct QuadraturePolicy {
  // How the Laguerre variable is scaled against each mode's decay rate.
  // per_mode rescales by 1 + lambda_k so the rule is exact mode by mode;
  // unit uses the raw rule and degrades for large lambda_k.
  enum class Rate { per_mode, unit };

  std::size_t nodes = 64;
  double truncation = std::numeric_limits<double>::infinity();  // drop nodes with s above this
  double tolerance = 1e-10;  // relative disagreement allowed against the half-size rule
  Rate rate = Rate::per_mode;
};

struct GammaResult {
  Field value;
  double error_estimate = 0.0;
};

namespace detail {
inline Field gamma_rule(const SpectralOperator& op, double r, const Field& u, const GaussRule& rule,
                        const QuadraturePolicy& policy) {
  const double a = 0.5 * r - 1.0;
  Field out = Field::Zero(u.size());
  for (Eigen::Index k = 0; k < u.size(); ++k) {
    const double lam = op.lambdas()[k];
    const double beta = policy.rate == QuadraturePolicy::Rate::per_mode ? 1.0 + lam : 1.0;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < rule.nodes.size(); ++i) {
      const double x = rule.nodes[i];
      const double s = x / beta;
      if (s > policy.truncation) continue;
      // integrand e^{-s} (T_s u)_k, with the Laguerre weight of x divided out
      acc += rule.weights[i] * std::exp(x - s) * std::exp(-lam * s);
    }
    out[k] = acc * std::pow(beta, -(a + 1.0)) * u[k];
  }
  return out;
}
}  // namespace detail

// V_r u = Gamma(r/2)^{-1} int_0^inf s^{r/2-1} e^{-s} T_s u ds, by quadrature.
// Throws QuadratureError when the rule and its half-size companion disagree
// by more than the policy tolerance.
inline GammaResult gamma_transform_checked(const SpectralOperator& op, double r, const Field& u,
                                           const QuadraturePolicy& policy = {}) {
  require(std::isfinite(r) && r > 0.0, "gamma_transform: r must be positive");
  require(policy.nodes >= 2 && policy.nodes <= 150, "gamma_transform: node count must lie in [2, 150]");
  require_dim(op.size(), static_cast<std::size_t>(u.size()), "gamma_transform");
  const double a = 0.5 * r - 1.0;
  const Field full = detail::gamma_rule(op, r, u, detail::cached_laguerre(policy.nodes, a), policy);
  const Field half = detail::gamma_rule(op, r, u, detail::cached_laguerre(policy.nodes / 2, a), policy);
  GammaResult res{full, 0.0};
  const double scale = full.cwiseAbs().maxCoeff();
  const double diff = (full - half).cwiseAbs().maxCoeff();
  res.error_estimate = scale > 0.0 ? diff / scale : diff;
  if (!(res.error_estimate <= policy.tolerance)) {
    throw QuadratureError("gamma_transform: quadrature did not reach the requested tolerance",
                          res.error_estimate);
  }
  return res;
}

inline Field gamma_transform(const SpectralOperator& op, double r, const Field& u,
                             const QuadraturePolicy& policy = {}) {
  return gamma_transform_checked(op, r, u, policy).value;
}

inline void to_json(nlohmann::json& j, const SpectralOperator& op) {
  std::vector<double> lam(op.lambdas().data(), op.lambdas().data() + op.size());
  j = nlohmann::json{{"label", op.label()}, {"N", op.size()}, {"lambdas", lam}};
}

inline SpectralOperator operator_from_json(const nlohmann::json& j) {
  auto lam = j.at("lambdas").get<std::vector<double>>();
  require(j.at("N").get<std::size_t>() == lam.size(), "operator JSON: N does not match lambdas");
  return SpectralOperator(std::move(lam), j.value("label", std::string("explicit")));
}

}  // namespace ddspme
