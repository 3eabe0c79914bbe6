#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ddspme/assignment.hpp"
#include "ddspme/error.hpp"
#include "ddspme/parallel.hpp"
#include "ddspme/sinkhorn.hpp"
#include "ddspme/spectral_operator.hpp"

namespace ddspme {

// Uniform empirical law of M particles; particle i is column i.
class EmpiricalMeasure {
 public:
  EmpiricalMeasure() = default;
  explicit EmpiricalMeasure(Ensemble particles) : particles_(std::move(particles)) {
    require(particles_.cols() >= 1, "EmpiricalMeasure: needs at least one particle");
    require(particles_.allFinite(), "EmpiricalMeasure: particles must be finite");
  }
  explicit EmpiricalMeasure(const std::vector<Field>& particles) {
    require(!particles.empty(), "EmpiricalMeasure: needs at least one particle");
    particles_.resize(particles.front().size(), static_cast<Eigen::Index>(particles.size()));
    for (std::size_t i = 0; i < particles.size(); ++i) {
      require_dim(static_cast<std::size_t>(particles_.rows()), static_cast<std::size_t>(particles[i].size()),
                  "EmpiricalMeasure");
      particles_.col(static_cast<Eigen::Index>(i)) = particles[i];
    }
    require(particles_.allFinite(), "EmpiricalMeasure: particles must be finite");
  }

  static EmpiricalMeasure dirac(const Field& x) { return EmpiricalMeasure(Ensemble(x)); }

  std::size_t size() const { return static_cast<std::size_t>(particles_.cols()); }
  std::size_t dim() const { return static_cast<std::size_t>(particles_.rows()); }
  const Ensemble& particles() const { return particles_; }
  Field particle(std::size_t i) const { return particles_.col(static_cast<Eigen::Index>(i)); }
  Field mean() const { return particles_.rowwise().mean(); }

  bool operator==(const EmpiricalMeasure& o) const {
    return particles_.rows() == o.particles_.rows() && particles_.cols() == o.particles_.cols() &&
           particles_ == o.particles_;
  }

 private:
  Ensemble particles_;
};

// Time-indexed family of empirical laws on a strictly increasing grid.
// Lookup between nodes is piecewise constant from the left.
class MeasureFlow {
 public:
  MeasureFlow() = default;
  MeasureFlow(std::vector<double> times, std::vector<EmpiricalMeasure> measures)
      : times_(std::move(times)), measures_(std::move(measures)) {
    require(times_.size() == measures_.size(), "MeasureFlow: node count must equal measure count");
    for (std::size_t i = 0; i < times_.size(); ++i) check_node(i);
  }

  static MeasureFlow constant(const EmpiricalMeasure& mu, const std::vector<double>& times) {
    return MeasureFlow(times, std::vector<EmpiricalMeasure>(times.size(), mu));
  }

  void append(double t, EmpiricalMeasure mu) {
    times_.push_back(t);
    measures_.push_back(std::move(mu));
    check_node(times_.size() - 1);
  }

  std::size_t size() const { return times_.size(); }
  bool empty() const { return times_.empty(); }
  const std::vector<double>& times() const { return times_; }
  const std::vector<EmpiricalMeasure>& measures() const { return measures_; }
  const EmpiricalMeasure& measure(std::size_t i) const { return measures_.at(i); }

  // Index of the last node at or before t (nodes within a relative 1e-9 of t count as equal).
  std::size_t index_at(double t) const {
    require(!times_.empty(), "MeasureFlow: empty flow");
    const double slack = 1e-9 * std::max(1.0, std::abs(t));
    if (t < times_.front() - slack) throw InvalidArgument("MeasureFlow: time before the first node");
    auto it = std::upper_bound(times_.begin(), times_.end(), t + slack);
    return static_cast<std::size_t>(std::distance(times_.begin(), it)) - 1;
  }

  const EmpiricalMeasure& at(double t) const { return measures_[index_at(t)]; }

 private:
  void check_node(std::size_t i) const {
    require(std::isfinite(times_[i]), "MeasureFlow: non-finite time node");
    if (i == 0) return;
    require(times_[i] > times_[i - 1], "MeasureFlow: time nodes must be strictly increasing");
    require(measures_[i].size() == measures_[0].size() && measures_[i].dim() == measures_[0].dim(),
            "MeasureFlow: all measures must share particle count and dimension");
  }

  std::vector<double> times_;
  std::vector<EmpiricalMeasure> measures_;
};

inline double second_moment(const EmpiricalMeasure& mu, const SpectralOperator& op,
                            Space space = Space::F12Dual) {
  require_dim(op.size(), mu.dim(), "second_moment");
  return column_norms_squared(op, space, mu.particles()).mean();
}

// C_ij = ||x_i - y_j||^2 in the dual norm.
inline Eigen::MatrixXd cost_matrix(const SpectralOperator& op, const EmpiricalMeasure& mu,
                                   const EmpiricalMeasure& nu) {
  require_dim(op.size(), mu.dim(), "cost_matrix");
  require_dim(op.size(), nu.dim(), "cost_matrix");
  const Eigen::ArrayXd w = op.weights(Space::F12Dual);
  const Ensemble& x = mu.particles();
  const Ensemble& y = nu.particles();
  Eigen::MatrixXd c(x.cols(), y.cols());
  parallel_for(static_cast<std::size_t>(y.cols()), [&](std::size_t jj) {
    const auto j = static_cast<Eigen::Index>(jj);
    c.col(j) = ((x.colwise() - y.col(j)).array().square().colwise() * w).colwise().sum().transpose();
  });
  return c;
}

enum class OtMethod { exact, entropic, automatic };

inline const char* to_string(OtMethod m) {
  switch (m) {
    case OtMethod::exact: return "exact";
    case OtMethod::entropic: return "entropic";
    case OtMethod::automatic: return "auto";
  }
  return "?";
}

struct W2Options {
  OtMethod method = OtMethod::automatic;
  double eps_rel = 0.01;                  // entropic regularization relative to the median cost
  std::size_t max_iter = 500;
  double tol = 1e-10;
  std::size_t exact_max_particles = 64;   // automatic switches to entropic above this
};

struct TransportPlan {
  OtMethod method = OtMethod::exact;
  double cost = 0.0;                      // squared distance realized by the plan
  std::vector<int> assignment;            // exact: particle i of mu goes to assignment[i] of nu
  Eigen::MatrixXd coupling;               // entropic: coupling matrix with uniform marginals
  std::size_t iterations = 0;
  double regularization = 0.0;
};

struct W2Result {
  double value = 0.0;
  TransportPlan plan;
};

namespace detail {
inline double median_of(const Eigen::MatrixXd& c) {
  std::vector<double> v(c.data(), c.data() + c.size());
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}
}  // namespace detail

inline W2Result w2(const SpectralOperator& op, const EmpiricalMeasure& mu, const EmpiricalMeasure& nu,
                   const W2Options& opts = {}) {
  OtMethod method = opts.method;
  if (method == OtMethod::automatic) {
    method = (mu.size() == nu.size() && mu.size() <= opts.exact_max_particles) ? OtMethod::exact
                                                                                : OtMethod::entropic;
  }
  const Eigen::MatrixXd c = cost_matrix(op, mu, nu);
  W2Result res;
  res.plan.method = method;
  if (method == OtMethod::exact) {
    if (mu.size() != nu.size()) {
      throw InvalidArgument("w2: exact method needs equal particle counts");
    }
    Assignment a = solve_assignment(c);
    res.plan.cost = a.cost / static_cast<double>(mu.size());
    res.plan.assignment = std::move(a.row_to_col);
    res.value = std::sqrt(std::max(0.0, res.plan.cost));
    return res;
  }

  double scale = detail::median_of(c);
  if (!(scale > 0.0)) scale = c.mean();
  if (!(scale > 0.0)) {
    // Both measures are the same single point.
    res.plan.coupling = Eigen::MatrixXd::Constant(c.rows(), c.cols(), 1.0 / static_cast<double>(c.size()));
    return res;
  }
  SinkhornOptions so{opts.eps_rel * scale, opts.max_iter, opts.tol};
  SinkhornResult xy = sinkhorn(c, so);
  const SinkhornResult xx = sinkhorn(cost_matrix(op, mu, mu), so);
  const SinkhornResult yy = sinkhorn(cost_matrix(op, nu, nu), so);
  const double divergence = xy.value - 0.5 * xx.value - 0.5 * yy.value;
  res.value = std::sqrt(std::max(0.0, divergence));
  res.plan.cost = (xy.plan.array() * c.array()).sum();
  res.plan.coupling = std::move(xy.plan);
  res.plan.iterations = xy.iterations + xy.newton_iterations + xx.iterations + xx.newton_iterations +
                        yy.iterations + yy.newton_iterations;
  res.plan.regularization = so.epsilon;
  return res;
}

// Cost of pairing particle i with particle i: an upper bound on w2^2.
inline double synchronous_cost(const SpectralOperator& op, const EmpiricalMeasure& mu,
                               const EmpiricalMeasure& nu) {
  require(mu.size() == nu.size(), "synchronous_cost: particle counts differ");
  require_dim(op.size(), mu.dim(), "synchronous_cost");
  require_dim(op.size(), nu.dim(), "synchronous_cost");
  return column_norms_squared(op, Space::F12Dual, mu.particles() - nu.particles()).mean();
}

// sup over grid nodes r in [s, t] of exp(-lambda r) w2(A(r), B(r)).
inline double flow_distance(const SpectralOperator& op, const MeasureFlow& a, const MeasureFlow& b,
                            double lambda_disc, double s, double t, const W2Options& opts = {}) {
  require(lambda_disc >= 0.0, "flow_distance: discount must be nonnegative");
  require(s <= t, "flow_distance: empty window");
  const double slack = 1e-9 * std::max({1.0, std::abs(s), std::abs(t)});
  std::vector<std::size_t> ia, ib;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.times()[i] >= s - slack && a.times()[i] <= t + slack) ia.push_back(i);
  }
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b.times()[i] >= s - slack && b.times()[i] <= t + slack) ib.push_back(i);
  }
  if (ia.size() != ib.size() || ia.empty()) throw InvalidArgument("flow_distance: grid mismatch");
  for (std::size_t n = 0; n < ia.size(); ++n) {
    if (std::abs(a.times()[ia[n]] - b.times()[ib[n]]) > slack) {
      throw InvalidArgument("flow_distance: grid mismatch");
    }
  }
  std::vector<double> vals(ia.size());
  parallel_for(ia.size(), [&](std::size_t n) {
    const double r = a.times()[ia[n]];
    vals[n] = std::exp(-lambda_disc * r) * w2(op, a.measure(ia[n]), b.measure(ib[n]), opts).value;
  });
  return *std::max_element(vals.begin(), vals.end());
}

inline double flow_distance(const SpectralOperator& op, const MeasureFlow& a, const MeasureFlow& b,
                            double lambda_disc, const W2Options& opts = {}) {
  require(!a.empty(), "flow_distance: empty flow");
  return flow_distance(op, a, b, lambda_disc, a.times().front(), a.times().back(), opts);
}

inline nlohmann::json measure_to_json(const EmpiricalMeasure& mu) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const Field p = mu.particle(i);
    arr.push_back(std::vector<double>(p.data(), p.data() + p.size()));
  }
  return arr;
}

inline EmpiricalMeasure measure_from_json(const nlohmann::json& j) {
  std::vector<Field> ps;
  for (const auto& row : j) {
    const auto v = row.get<std::vector<double>>();
    ps.emplace_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  }
  return EmpiricalMeasure(ps);
}

namespace detail {
inline constexpr char kMeasureMagic[8] = {'D', 'D', 'S', 'P', 'M', 'E', 'M', 'S'};
}

// Binary layout: 8-byte tag, u64 N, u64 M, then N*M doubles column by column.
inline void write_measure(std::ostream& out, const EmpiricalMeasure& mu) {
  const std::uint64_t n = mu.dim(), m = mu.size();
  out.write(detail::kMeasureMagic, 8);
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(reinterpret_cast<const char*>(&m), sizeof m);
  out.write(reinterpret_cast<const char*>(mu.particles().data()),
            static_cast<std::streamsize>(n * m * sizeof(double)));
}

inline EmpiricalMeasure read_measure(std::istream& in) {
  char tag[8];
  std::uint64_t n = 0, m = 0;
  in.read(tag, 8);
  if (!in || !std::equal(tag, tag + 8, detail::kMeasureMagic)) throw Error("read_measure: bad header");
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  in.read(reinterpret_cast<char*>(&m), sizeof m);
  Ensemble x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  in.read(reinterpret_cast<char*>(x.data()), static_cast<std::streamsize>(n * m * sizeof(double)));
  if (!in) throw Error("read_measure: truncated data");
  return EmpiricalMeasure(std::move(x));
}

}  // namespace ddspme
