#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "ddspme/measure.hpp"

using namespace ddspme;

namespace {

EmpiricalMeasure random_measure(std::mt19937_64& gen, std::size_t n, std::size_t m, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Ensemble x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    for (Eigen::Index k = 0; k < x.rows(); ++k) x(k, j) = nd(gen);
  return EmpiricalMeasure(std::move(x));
}

// Independent oracle: scan every permutation with dual norms computed per pair.
double brute_force_w2(const SpectralOperator& op, const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
  const std::size_t m = mu.size();
  std::vector<std::size_t> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) acc += norm_squared(op, Space::F12Dual, mu.particle(i) - nu.particle(perm[i]));
    best = std::min(best, acc);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return std::sqrt(best / static_cast<double>(m));
}

W2Options exact() {
  W2Options o;
  o.method = OtMethod::exact;
  return o;
}

W2Options entropic(double eps_rel) {
  W2Options o;
  o.method = OtMethod::entropic;
  o.eps_rel = eps_rel;
  return o;
}

}  // namespace

TEST(SecondMoment, Examples) {
  const auto op = make_fractional_laplacian(4, 1.0);
  const Field x(Eigen::Vector4d(1.0, 2.0, -1.0, 0.5));
  EXPECT_EQ(second_moment(EmpiricalMeasure::dirac(Field::Zero(4)), op), 0.0);
  EXPECT_DOUBLE_EQ(second_moment(EmpiricalMeasure::dirac(x), op), norm_squared(op, Space::F12Dual, x));
  EXPECT_DOUBLE_EQ(second_moment(EmpiricalMeasure(std::vector<Field>{x, -x}), op), norm_squared(op, Space::F12Dual, x));
  EXPECT_THROW(second_moment(EmpiricalMeasure::dirac(Field::Zero(3)), op), DimensionMismatch);
}

TEST(EmpiricalMeasure, Invariants) {
  EXPECT_THROW(EmpiricalMeasure(std::vector<Field>{}), InvalidArgument);
  EXPECT_THROW(EmpiricalMeasure(std::vector<Field>{Field::Zero(2), Field::Zero(3)}), DimensionMismatch);
  Field bad = Field::Zero(2);
  bad[1] = std::nan("");
  EXPECT_THROW(EmpiricalMeasure::dirac(bad), InvalidArgument);
}

TEST(MeasureFlow, Invariants) {
  const auto mu = EmpiricalMeasure::dirac(Field::Zero(2));
  EXPECT_THROW(MeasureFlow({0.0, 0.0}, {mu, mu}), InvalidArgument);
  EXPECT_THROW(MeasureFlow({0.0}, {mu, mu}), InvalidArgument);
  const auto two = EmpiricalMeasure(std::vector<Field>{Field::Zero(2), Field::Ones(2)});
  EXPECT_THROW(MeasureFlow({0.0, 1.0}, {mu, two}), InvalidArgument);
  const MeasureFlow f({0.0, 1.0, 2.0}, {mu, mu, mu});
  EXPECT_EQ(f.index_at(0.5), 0u);
  EXPECT_EQ(f.index_at(1.0), 1u);
  EXPECT_EQ(f.index_at(5.0), 2u);
  EXPECT_THROW(f.index_at(-1.0), InvalidArgument);
}

TEST(W2, DiracPair) {
  const auto op = make_fractional_laplacian(3, 0.5);
  const Field x(Eigen::Vector3d(1.0, 0.0, 2.0)), y(Eigen::Vector3d(-1.0, 1.0, 0.0));
  const double want = norm(op, Space::F12Dual, x - y);
  EXPECT_NEAR(w2(op, EmpiricalMeasure::dirac(x), EmpiricalMeasure::dirac(y), exact()).value, want, 1e-15);
}

TEST(W2, SameMeasureGivesIdentityAssignment) {
  std::mt19937_64 gen(1);
  const auto op = make_fractional_laplacian(5, 1.0);
  const auto mu = random_measure(gen, 5, 10);
  const W2Result r = w2(op, mu, mu, exact());
  EXPECT_EQ(r.value, 0.0);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(r.plan.assignment[i], static_cast<int>(i));
}

TEST(W2, TwoParticlesMatchBothPairings) {
  const auto op = make_fractional_laplacian(2, 1.0);
  const Field a(Eigen::Vector2d(0, 0)), b(Eigen::Vector2d(1, 0)), c(Eigen::Vector2d(0.9, 0.1)), d(Eigen::Vector2d(0.1, 0.2));
  auto n2 = [&](const Field& u) { return norm_squared(op, Space::F12Dual, u); };
  const double want = std::min(std::sqrt((n2(a - c) + n2(b - d)) / 2), std::sqrt((n2(a - d) + n2(b - c)) / 2));
  const EmpiricalMeasure mu(std::vector<Field>{a, b}), nu(std::vector<Field>{c, d});
  EXPECT_NEAR(w2(op, mu, nu, exact()).value, want, 1e-15);
}

TEST(W2, ExactMatchesPermutationOracle) {
  std::mt19937_64 gen(2);
  const auto op = make_fractional_laplacian(6, 0.8);
  for (int inst = 0; inst < 500; ++inst) {
    const std::size_t m = 1 + static_cast<std::size_t>(inst % 6);
    const auto mu = random_measure(gen, 6, m), nu = random_measure(gen, 6, m);
    EXPECT_NEAR(w2(op, mu, nu, exact()).value, brute_force_w2(op, mu, nu), 1e-12);
  }
}

TEST(W2, ExactPlanIsPermutation) {
  std::mt19937_64 gen(3);
  const auto op = make_fractional_laplacian(4, 1.0);
  const auto mu = random_measure(gen, 4, 40), nu = random_measure(gen, 4, 40);
  const W2Result r = w2(op, mu, nu, exact());
  const std::set<int> cols(r.plan.assignment.begin(), r.plan.assignment.end());
  EXPECT_EQ(cols.size(), 40u);
  EXPECT_EQ(*cols.begin(), 0);
  EXPECT_EQ(*cols.rbegin(), 39);
}

TEST(W2, IsAMetric) {
  std::mt19937_64 gen(4);
  const auto op = make_fractional_laplacian(5, 0.5);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t m = 1 + static_cast<std::size_t>(t % 8);
    const auto a = random_measure(gen, 5, m), b = random_measure(gen, 5, m), c = random_measure(gen, 5, m);
    const double ab = w2(op, a, b, exact()).value, ba = w2(op, b, a, exact()).value;
    const double bc = w2(op, b, c, exact()).value, ac = w2(op, a, c, exact()).value;
    EXPECT_NEAR(ab, ba, 1e-12);
    EXPECT_LE(ac, ab + bc + 1e-12);
    EXPECT_GT(ab, 0.0);
    EXPECT_EQ(w2(op, a, a, exact()).value, 0.0);
  }
}

TEST(W2, SynchronousPairingIsAnUpperBound) {
  std::mt19937_64 gen(5);
  const auto op = make_fractional_laplacian(8, 1.0);
  for (int t = 0; t < 200; ++t) {
    const auto a = random_measure(gen, 8, 12), b = random_measure(gen, 8, 12);
    EXPECT_LE(w2(op, a, b, exact()).value, std::sqrt(synchronous_cost(op, a, b)) + 1e-12);
  }
}

TEST(W2, ExactRejectsUnequalCounts) {
  std::mt19937_64 gen(6);
  const auto op = make_fractional_laplacian(3, 1.0);
  EXPECT_THROW(w2(op, random_measure(gen, 3, 2), random_measure(gen, 3, 3), exact()), InvalidArgument);
}

TEST(W2, AutomaticSwitchesByParticleCount) {
  std::mt19937_64 gen(7);
  const auto op = make_fractional_laplacian(3, 1.0);
  EXPECT_EQ(w2(op, random_measure(gen, 3, 8), random_measure(gen, 3, 8)).plan.method, OtMethod::exact);
  EXPECT_EQ(w2(op, random_measure(gen, 3, 70), random_measure(gen, 3, 70)).plan.method, OtMethod::entropic);
}

TEST(W2, EntropicPlanIsDoublyStochastic) {
  std::mt19937_64 gen(8);
  const auto op = make_fractional_laplacian(4, 1.0);
  for (double e : {1.0, 0.1, 0.01}) {
    const auto mu = random_measure(gen, 4, 9), nu = random_measure(gen, 4, 7);
    const W2Result r = w2(op, mu, nu, entropic(e));
    const Eigen::MatrixXd& p = r.plan.coupling;
    EXPECT_LE((p.rowwise().sum().array() * 9.0 - 1.0).abs().maxCoeff(), 1e-8);
    EXPECT_LE((p.colwise().sum().array() * 7.0 - 1.0).abs().maxCoeff(), 1e-8);
  }
}

TEST(W2, EntropicApproachesExactMonotonically) {
  std::mt19937_64 gen(9);
  const auto op = make_fractional_laplacian(8, 1.0);
  for (int inst = 0; inst < 50; ++inst) {
    const auto mu = random_measure(gen, 8, 8), nu = random_measure(gen, 8, 8);
    const double ex = w2(op, mu, nu, exact()).value;
    double prev = std::numeric_limits<double>::infinity();
    for (double e : {1.0, 0.1, 0.01}) {
      const double err = std::abs(w2(op, mu, nu, entropic(e)).value - ex);
      EXPECT_LE(err, prev) << "instance " << inst << " eps " << e;
      prev = err;
    }
    EXPECT_LE(prev, 0.05 * ex);
  }
}

TEST(Sinkhorn, ReportsNonConvergence) {
  // Asymmetric costs at moderate epsilon: one sweep cannot balance both marginals.
  Eigen::MatrixXd c(3, 3);
  c << 0.0, 1.0, 3.0, 2.0, 0.0, 1.0, 1.0, 4.0, 0.0;
  SinkhornOptions o;
  o.epsilon = 0.5;
  o.max_iter = 1;
  o.newton_max_iter = 0;
  o.tol = 1e-14;
  EXPECT_THROW(sinkhorn(c, o), ConvergenceError);
}

TEST(FlowDistance, Examples) {
  std::mt19937_64 gen(10);
  const auto op = make_fractional_laplacian(4, 1.0);
  const auto a0 = random_measure(gen, 4, 5), a1 = random_measure(gen, 4, 5);
  const auto b0 = random_measure(gen, 4, 5), b1 = random_measure(gen, 4, 5);
  const MeasureFlow a({0.0, 0.5}, {a0, a1}), b({0.0, 0.5}, {b0, b1});
  EXPECT_EQ(flow_distance(op, a, a, 1.0, exact()), 0.0);

  const MeasureFlow single_a({0.7}, {a0}), single_b({0.7}, {b0});
  EXPECT_NEAR(flow_distance(op, single_a, single_b, 2.0, exact()), std::exp(-1.4) * w2(op, a0, b0, exact()).value,
              1e-15);

  const double want = std::max(w2(op, a0, b0, exact()).value, w2(op, a1, b1, exact()).value);
  EXPECT_EQ(flow_distance(op, a, b, 0.0, exact()), want);

  const MeasureFlow shifted({0.0, 0.6}, {b0, b1});
  EXPECT_THROW(flow_distance(op, a, shifted, 0.0, exact()), InvalidArgument);
}

TEST(FlowDistance, WindowRestriction) {
  std::mt19937_64 gen(11);
  const auto op = make_fractional_laplacian(3, 1.0);
  std::vector<EmpiricalMeasure> as, bs;
  for (int i = 0; i < 4; ++i) {
    as.push_back(random_measure(gen, 3, 4));
    bs.push_back(random_measure(gen, 3, 4));
  }
  const MeasureFlow a({0, 1, 2, 3}, as), b({0, 1, 2, 3}, bs);
  const double want = std::max(w2(op, as[1], bs[1], exact()).value, w2(op, as[2], bs[2], exact()).value);
  EXPECT_EQ(flow_distance(op, a, b, 0.0, 1.0, 2.0, exact()), want);
}

TEST(MeasureIo, JsonAndBinaryRoundTrip) {
  std::mt19937_64 gen(12);
  const auto mu = random_measure(gen, 5, 7);
  EXPECT_EQ(measure_from_json(nlohmann::json::parse(measure_to_json(mu).dump())), mu);
  std::stringstream ss;
  write_measure(ss, mu);
  EXPECT_EQ(read_measure(ss), mu);
  std::stringstream bad("XXXXXXXX");
  EXPECT_THROW(read_measure(bad), Error);
}
