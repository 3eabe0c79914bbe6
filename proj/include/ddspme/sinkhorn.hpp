#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>

#include "ddspme/error.hpp"

namespace ddspme {

struct SinkhornOptions {
  double epsilon = 1.0;        // absolute regularization
  std::size_t max_iter = 500;
  double tol = 1e-10;          // max relative marginal defect at exit
  std::size_t newton_max_iter = 50;  // refinement steps when the sweeps stall
};

struct SinkhornResult {
  double value = 0.0;          // regularized OT value <a,f> + <b,g>
  Eigen::MatrixXd plan;        // coupling with marginals 1/rows and 1/cols
  std::size_t iterations = 0;
  std::size_t newton_iterations = 0;
  double marginal_error = 0.0;
};

namespace detail {
// Soft-min over each row of (g_j - C_ij) / eps shifted by log weights.
inline Eigen::VectorXd soft_rows(const Eigen::MatrixXd& cost, const Eigen::VectorXd& g, double eps,
                                 double log_b) {
  const Eigen::Index n = cost.rows();
  Eigen::VectorXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::ArrayXd z = (g.array() - cost.row(i).transpose().array()) / eps;
    const double m = z.maxCoeff();
    out[i] = -eps * (m + std::log((z - m).exp().sum()) + log_b);
  }
  return out;
}
}  // namespace detail

namespace detail {
struct SemiDual {
  Eigen::VectorXd f;
  Eigen::MatrixXd plan;
  Eigen::VectorXd cols;
  double value = 0.0;
};

// Row potential, plan, column sums and dual value for a column potential g.
inline SemiDual semi_dual(const Eigen::MatrixXd& cost, const Eigen::VectorXd& g, double eps, double log_a,
                          double log_b) {
  SemiDual s;
  s.f = soft_rows(cost, g, eps, log_b);
  s.plan.resize(cost.rows(), cost.cols());
  for (Eigen::Index i = 0; i < cost.rows(); ++i) {
    s.plan.row(i) = ((s.f[i] + g.array() - cost.row(i).transpose().array()) / eps + log_a + log_b).exp().transpose();
  }
  s.cols = s.plan.colwise().sum().transpose();
  s.value = s.f.mean() + g.mean();
  return s;
}
}  // namespace detail

// Log-domain Sinkhorn for uniform marginals. At small epsilon the sweeps can
// contract very slowly; if they have not met the tolerance after max_iter,
// Newton steps on the concave semi-dual in g (rows exact, columns solved)
// finish the job.
inline SinkhornResult sinkhorn(const Eigen::MatrixXd& cost, const SinkhornOptions& opts) {
  require(opts.epsilon > 0.0 && std::isfinite(opts.epsilon), "sinkhorn: epsilon must be positive");
  require(cost.rows() > 0 && cost.cols() > 0, "sinkhorn: empty cost matrix");
  const double log_a = -std::log(static_cast<double>(cost.rows()));
  const double log_b = -std::log(static_cast<double>(cost.cols()));
  const double b = 1.0 / static_cast<double>(cost.cols());
  const double eps = opts.epsilon;
  const Eigen::MatrixXd cost_t = cost.transpose();

  Eigen::VectorXd f = Eigen::VectorXd::Zero(cost.rows());
  Eigen::VectorXd g = Eigen::VectorXd::Zero(cost.cols());
  SinkhornResult res;
  double err = std::numeric_limits<double>::infinity();
  for (std::size_t it = 1; it <= opts.max_iter; ++it) {
    f = detail::soft_rows(cost, g, eps, log_b);
    g = detail::soft_rows(cost_t, f, eps, log_a);
    // Columns are exact after the g update; the row defect measures progress.
    err = 0.0;
    for (Eigen::Index i = 0; i < cost.rows(); ++i) {
      const double row = ((f[i] + g.array() - cost.row(i).transpose().array()) / eps + log_b).exp().sum();
      err = std::max(err, std::abs(row - 1.0));
    }
    res.iterations = it;
    if (err <= opts.tol) break;
  }

  if (err <= opts.tol) {
    res.value = f.mean() + g.mean();
    res.plan.resize(cost.rows(), cost.cols());
    for (Eigen::Index i = 0; i < cost.rows(); ++i) {
      res.plan.row(i) =
          ((f[i] + g.array() - cost.row(i).transpose().array()) / eps + log_a + log_b).exp().transpose();
    }
  } else {
    // Hessian of the semi-dual is -(diag(cols) - P^T diag(1/a) P) / eps with
    // the constant vector in its kernel; the rank-one term pins that gauge.
    const Eigen::Index n = cost.cols();
    const double a_inv = static_cast<double>(cost.rows());
    detail::SemiDual s = detail::semi_dual(cost, g, eps, log_a, log_b);
    err = (s.cols.array() / b - 1.0).abs().maxCoeff();
    for (std::size_t k = 0; k < opts.newton_max_iter && err > opts.tol; ++k) {
      const Eigen::MatrixXd h = Eigen::MatrixXd(s.cols.asDiagonal()) - a_inv * s.plan.transpose() * s.plan +
                                Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
      const Eigen::VectorXd step = h.ldlt().solve(eps * (Eigen::VectorXd::Constant(n, b) - s.cols));
      double t = 1.0;
      detail::SemiDual next = detail::semi_dual(cost, g + step, eps, log_a, log_b);
      while (next.value < s.value - 1e-15 * std::abs(s.value) && t > 1e-10) {
        t *= 0.5;
        next = detail::semi_dual(cost, g + t * step, eps, log_a, log_b);
      }
      g += t * step;
      s = std::move(next);
      err = (s.cols.array() / b - 1.0).abs().maxCoeff();
      res.newton_iterations = k + 1;
    }
    res.value = s.value;
    res.plan = std::move(s.plan);
  }
  res.marginal_error = err;
  if (!(err <= opts.tol)) {
    throw ConvergenceError("sinkhorn: marginals not within tolerance after max iterations",
                           res.iterations + res.newton_iterations, err);
  }
  return res;
}

}  // namespace ddspme
