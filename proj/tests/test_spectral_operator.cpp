#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ddspme/spectral_operator.hpp"

using namespace ddspme;

namespace {

Field random_field(std::mt19937_64& gen, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Field u(static_cast<Eigen::Index>(n));
  for (Eigen::Index k = 0; k < u.size(); ++k) u[k] = nd(gen);
  return u;
}

Field unit(std::size_t n, std::size_t k) {
  Field e = Field::Zero(static_cast<Eigen::Index>(n));
  e[static_cast<Eigen::Index>(k)] = 1.0;
  return e;
}

}  // namespace

TEST(FractionalLaplacian, ThreeModesAlphaOne) {
  const auto op = make_fractional_laplacian(3, 1.0);
  EXPECT_EQ(op.lambda(0), 0.0);
  EXPECT_EQ(op.lambda(1), 1.0);
  EXPECT_EQ(op.lambda(2), 1.0);
}

TEST(FractionalLaplacian, ThreeModesAlphaHalf) {
  const auto op = make_fractional_laplacian(3, 0.5);
  EXPECT_EQ(op.lambdas(), Eigen::Vector3d(0, 1, 1));
}

TEST(FractionalLaplacian, FiveModesAlphaHalfMatchesDirectPower) {
  const auto op = make_fractional_laplacian(5, 0.5);
  const double omega[] = {0, 1, 1, 2, 2};
  for (std::size_t k = 0; k < 5; ++k) EXPECT_DOUBLE_EQ(op.lambda(k), std::pow(omega[k], 1.0));
  EXPECT_DOUBLE_EQ(op.lambda(3), 2.0);
}

TEST(FractionalLaplacian, RejectsBadArguments) {
  EXPECT_THROW(make_fractional_laplacian(0, 0.5), InvalidArgument);
  EXPECT_THROW(make_fractional_laplacian(4, 0.0), InvalidArgument);
  EXPECT_THROW(make_fractional_laplacian(4, 1.5), InvalidArgument);
  EXPECT_THROW(SpectralOperator({0.0, -1.0}), InvalidArgument);
}

TEST(FractionalLaplacian, CustomBaseFrequencies) {
  const auto op = make_fractional_laplacian(3, 1.0, [](std::size_t k) { return 0.5 * static_cast<double>(k); });
  EXPECT_DOUBLE_EQ(op.lambda(2), 1.0);
  EXPECT_DOUBLE_EQ(op.lambda(1), 0.25);
}

TEST(ScaleApply, Examples) {
  const SpectralOperator op({0.0, 3.0, 1.0});
  EXPECT_TRUE(scale_apply(op, {-0.5}, unit(3, 1)).isApprox(0.5 * unit(3, 1)));
  const Field u(Eigen::Vector3d(1.0, -2.0, 0.25));
  EXPECT_EQ(scale_apply(op, {0.0}, u), u);
  const Field back = scale_apply(op, {-0.5}, scale_apply(op, {0.5}, unit(3, 2)));
  EXPECT_DOUBLE_EQ(back[2], 1.0);
  EXPECT_THROW(scale_apply(op, {0.5}, Field::Zero(2)), DimensionMismatch);
}

TEST(Norms, Examples) {
  const SpectralOperator op({0.0, 3.0});
  const Field u(Eigen::Vector2d(1.0, 1.0));
  EXPECT_DOUBLE_EQ(norm(op, Space::F12, u), std::sqrt(5.0));
  EXPECT_DOUBLE_EQ(norm(op, Space::F12Dual, u), std::sqrt(1.25));
  EXPECT_DOUBLE_EQ(norm(op, Space::L2, u), std::sqrt(2.0));
  for (Space s : {Space::L2, Space::F12, Space::F12Dual}) EXPECT_EQ(norm(op, s, Field::Zero(2)), 0.0);
  EXPECT_THROW(norm(op, Space::L2, Field::Zero(3)), DimensionMismatch);
}

TEST(Semigroup, Examples) {
  const SpectralOperator op({0.0, 1.0, 2.0});
  const Field u(Eigen::Vector3d(0.3, -0.4, 0.5));
  EXPECT_EQ(semigroup(op, 0.0, u), u);
  EXPECT_NEAR(semigroup(op, std::log(2.0), unit(3, 1))[1], 0.5, 1e-15);
  const Field v = u / u.norm();
  EXPECT_LE(semigroup(op, 1.0, v).norm(), 1.0);
  EXPECT_THROW(semigroup(op, -0.1, u), InvalidArgument);
}

TEST(GammaTransform, Examples) {
  const SpectralOperator op3({0.0, 3.0});
  EXPECT_NEAR(gamma_transform(op3, 1.0, unit(2, 1))[1], 0.5, 1e-10);
  const SpectralOperator op1({0.0, 1.0});
  EXPECT_NEAR(gamma_transform(op1, 2.0, unit(2, 1))[1], 0.5, 1e-10);

  std::mt19937_64 gen(3);
  const SpectralOperator op({0.0, 1.0, 2.0});
  const Field u = random_field(gen, 3);
  const Field exact = scale_apply(op, {-0.5}, u);
  EXPECT_LE((gamma_transform(op, 1.0, u) - exact).norm() / exact.norm(), 1e-8);
}

TEST(GammaTransform, AgreesWithMultiplierForManyExponents) {
  const auto op = make_fractional_laplacian(64, 0.75);
  std::mt19937_64 gen(5);
  for (double r : {0.3, 1.0, 1.7, 2.0, 3.5}) {
    const Field u = random_field(gen, 64);
    const Field exact = scale_apply(op, {-0.5 * r}, u);
    EXPECT_LE((gamma_transform(op, r, u) - exact).cwiseAbs().maxCoeff() / exact.cwiseAbs().maxCoeff(), 1e-8)
        << "r = " << r;
  }
}

TEST(GammaTransform, Errors) {
  const SpectralOperator op({0.0, 1.0});
  EXPECT_THROW(gamma_transform(op, 0.0, unit(2, 0)), InvalidArgument);
  EXPECT_THROW(gamma_transform(op, -1.0, unit(2, 0)), InvalidArgument);
  // A raw rule truncated at s = 0.5 cannot resolve the integral.
  QuadraturePolicy bad;
  bad.truncation = 0.5;
  bad.rate = QuadraturePolicy::Rate::unit;
  EXPECT_THROW(gamma_transform(op, 1.0, unit(2, 1), bad), QuadratureError);
}

TEST(GaussLaguerre, IntegratesPolynomialsExactly) {
  // Normalized weight x^a e^{-x} / Gamma(a+1): moment of x^m is (a+1)_m.
  const double a = -0.5;
  const GaussRule rule = gauss_laguerre(16, a);
  EXPECT_NEAR(rule.weights.sum(), 1.0, 1e-14);
  double expected = 1.0;
  for (int m = 1; m <= 6; ++m) {
    expected *= a + static_cast<double>(m);
    const double got = (rule.weights.array() * rule.nodes.array().pow(m)).sum();
    EXPECT_NEAR(got / expected, 1.0, 1e-12) << "m = " << m;
  }
}

TEST(SpectralProperties, IsometryOfOneMinusL) {
  std::mt19937_64 gen(11);
  const auto op = make_fractional_laplacian(32, 0.6);
  for (int i = 0; i < 1000; ++i) {
    const Field u = random_field(gen, 32), v = random_field(gen, 32);
    const double lhs = inner(op, Space::F12Dual, scale_apply(op, {1.0}, u), scale_apply(op, {1.0}, v));
    const double rhs = inner(op, Space::F12, u, v);
    const double scale = norm(op, Space::F12, u) * norm(op, Space::F12, v);
    EXPECT_LE(std::abs(lhs - rhs), 1e-12 * scale);
  }
}

TEST(SpectralProperties, RieszConsistencyPerMode) {
  std::mt19937_64 gen(12);
  const auto op = make_fractional_laplacian(16, 1.0);
  const Eigen::ArrayXd wd = op.weights(Space::F12Dual), wf = op.weights(Space::F12);
  for (int i = 0; i < 200; ++i) {
    const Field u = random_field(gen, 16);
    const Field lu = scale_apply(op, {1.0}, u);
    for (Eigen::Index k = 0; k < u.size(); ++k) {
      const double a = wd[k] * lu[k] * lu[k], b = wf[k] * u[k] * u[k];
      EXPECT_LE(std::abs(a - b), 4.0 * std::numeric_limits<double>::epsilon() * std::abs(b));
    }
  }
}

TEST(SpectralProperties, SandwichAndResolventContraction) {
  std::mt19937_64 gen(13);
  const auto op = make_fractional_laplacian(24, 0.4);
  for (int i = 0; i < 1000; ++i) {
    const Field u = random_field(gen, 24, 3.0);
    EXPECT_LE(norm(op, Space::F12Dual, u), norm(op, Space::L2, u));
    EXPECT_LE(norm(op, Space::L2, u), norm(op, Space::F12, u));
    EXPECT_LE(scale_apply(op, {-1.0}, u).norm(), u.norm());
  }
}

TEST(SpectralProperties, ResolventSqrtMonotoneInDelta) {
  std::mt19937_64 gen(14);
  const auto op = make_fractional_laplacian(16, 1.0);
  for (int i = 0; i < 50; ++i) {
    const Field u = random_field(gen, 16);
    double prev = 0.0;
    for (double delta : {1.0, 10.0, 100.0, 1000.0}) {
      const double cur = resolvent_sqrt(op, delta, u).norm();
      EXPECT_GE(cur, prev);
      EXPECT_LE(cur, u.norm() * (1 + 1e-15));
      prev = cur;
    }
    EXPECT_NEAR(resolvent_sqrt(op, 1e12, u).norm(), u.norm(), 1e-9 * u.norm());
  }
}

TEST(GridTransform, IsOrthogonal) {
  for (std::size_t n : {1u, 2u, 7u, 16u}) {
    const GridTransform g(n);
    const Eigen::MatrixXd q = g.matrix();
    EXPECT_TRUE((q.transpose() * q).isApprox(Eigen::MatrixXd::Identity(q.rows(), q.cols()), 1e-13)) << n;
  }
}

TEST(SpectralOperator, JsonRoundTrip) {
  const auto op = make_fractional_laplacian(6, 0.3);
  nlohmann::json j;
  to_json(j, op);
  EXPECT_EQ(j.at("N").get<std::size_t>(), 6u);
  const SpectralOperator back = operator_from_json(j);
  EXPECT_EQ(back.lambdas(), op.lambdas());
  EXPECT_EQ(back.label(), op.label());
}
