#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "ddspme/csv.hpp"
#include "ddspme/integrator.hpp"

using namespace ddspme;

namespace {

ModelSpec zero_model() {
  ModelSpec m;
  m.drift.kind = DriftKind::identity;
  m.drift.scale = 0.0;
  m.noise.K = 0;
  return m;
}

ModelSpec linear_decay() {
  ModelSpec m;
  m.drift.kind = DriftKind::identity;
  m.noise.K = 0;
  return m;
}

// Coupled tanh drift with affine measure-dependent noise on a 16-mode operator.
ModelSpec coupled_model() {
  ModelSpec m;
  m.drift.kind = DriftKind::tanh;
  m.drift.coupling = CouplingKind::mean_shift;
  m.drift.kappa = 2.0;
  m.noise.K = 4;
  m.noise.kind = NoiseKind::linear;
  m.noise.sigma = 1.0;
  m.noise.a = 1.0;
  m.noise.c = 0.5;
  m.noise.coupling_alpha = 1.0;
  return m;
}

InitSpec init_spec(double amplitude = 0.5, double mean = 1.0) {
  InitSpec s;
  s.amplitude = amplitude;
  s.mean = mean;
  return s;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ddspme_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(NoisePlan, DeterministicAndStandardNormal) {
  const NoisePlan plan{42, 3};
  EXPECT_EQ(plan.increment(1, 2, 3, 0.01), plan.increment(1, 2, 3, 0.01));
  EXPECT_NE(plan.increment(1, 2, 3, 0.01), plan.increment(1, 2, 4, 0.01));
  const double dt = 0.004;
  double s1 = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = plan.increment(static_cast<std::size_t>(i % 500), static_cast<std::size_t>(i % 3),
                                    static_cast<std::size_t>(i / 500), dt);
    s1 += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s1 / n, 0.0, 4.0 * std::sqrt(dt / n));
  EXPECT_NEAR(s2 / n / dt, 1.0, 0.02);
}

TEST(TimeGrid, WindowsShareGlobalSteps) {
  const TimeGrid g = TimeGrid::uniform(0.0, 1.0, 10);
  const TimeGrid w = g.window(4, 3);
  EXPECT_DOUBLE_EQ(w.t_start(), 0.4);
  EXPECT_DOUBLE_EQ(w.t_end(), 0.7);
  EXPECT_EQ(w.global_step(0), 4u);
  EXPECT_THROW(g.window(8, 3), InvalidArgument);
  EXPECT_THROW(TimeGrid::uniform(1.0, 1.0, 4), InvalidArgument);
}

TEST(IntegrateFrozen, ZeroDynamicsKeepsState) {
  const auto op = make_fractional_laplacian(8, 1.0);
  const auto init = sample_initial(op, 5, init_spec(), 1);
  const TimeGrid g = TimeGrid::uniform(0.0, 1.0, 50);
  const auto traj = integrate_frozen(op, zero_model(), 0.0, 0.0, MeasureFlow::constant(init, g.nodes()), init, g,
                                     NoisePlan{3, 0});
  for (const auto& s : traj.states) EXPECT_EQ(s, init.particles());
}

TEST(IntegrateFrozen, LinearDecayMatchesExponential) {
  const SpectralOperator op({1.0});
  const EmpiricalMeasure init = EmpiricalMeasure::dirac(Field::Ones(1));
  const TimeGrid g = TimeGrid::uniform(0.0, 1.0, 1000);
  const auto traj = integrate_frozen(op, linear_decay(), 0.0, 0.0, MeasureFlow::constant(init, g.nodes()), init, g,
                                     NoisePlan{0, 0});
  EXPECT_LE(std::abs(traj.terminal()(0, 0) - std::exp(-1.0)) / std::exp(-1.0), 2e-3);
}

TEST(IntegrateFrozen, PureNoiseIsSumOfIncrements) {
  const auto op = make_fractional_laplacian(4, 1.0);
  ModelSpec m = zero_model();
  m.noise.K = 1;
  m.noise.kind = NoiseKind::additive;
  m.noise.sigma = 0.7;
  m.noise.a = 1.0;
  const EmpiricalMeasure init = EmpiricalMeasure::dirac(Field::Constant(4, 0.25));
  const TimeGrid g = TimeGrid::uniform(0.0, 2.0, 400);
  const NoisePlan plan{9, 1};
  const auto traj = integrate_frozen(op, m, 0.0, 0.0, MeasureFlow::constant(init, g.nodes()), init, g, plan);
  double x = 0.25;
  for (std::size_t n = 0; n < g.n_steps; ++n) x += 0.7 * plan.increment(0, 0, n, g.dt);
  EXPECT_EQ(traj.terminal()(0, 0), x);
  EXPECT_EQ(traj.terminal()(1, 0), 0.25);
}

TEST(IntegrateFrozen, ViscousFactorIsAContraction) {
  const auto op = make_fractional_laplacian(16, 1.0);
  const auto init = sample_initial(op, 3, init_spec(), 2);
  const TimeGrid g = TimeGrid::uniform(0.0, 0.1, 1);
  const auto traj = integrate_frozen(op, zero_model(), 0.3, 0.5, MeasureFlow::constant(init, g.nodes()), init, g,
                                     NoisePlan{0, 0});
  const Eigen::ArrayXd factor = 1.0 / (1.0 + 0.1 * 0.5 * (op.lambdas().array() + 0.3));
  EXPECT_TRUE((factor > 0.0).all() && (factor <= 1.0).all());
  EXPECT_TRUE(traj.terminal().isApprox((init.particles().array().colwise() * factor).matrix(), 1e-15));
}

TEST(IntegrateFrozen, RejectsBadParameters) {
  const auto op = make_fractional_laplacian(4, 1.0);
  const auto init = sample_initial(op, 2, init_spec(), 1);
  const TimeGrid g = TimeGrid::uniform(0.0, 1.0, 10);
  const MeasureFlow flow = MeasureFlow::constant(init, g.nodes());
  EXPECT_THROW(integrate_frozen(op, zero_model(), 1.0, 0.0, flow, init, g, NoisePlan{}), InvalidArgument);
  EXPECT_THROW(integrate_frozen(op, zero_model(), 0.0, -0.1, flow, init, g, NoisePlan{}), InvalidArgument);
  EXPECT_THROW(integrate_frozen(op, zero_model(), 0.0, 0.0, flow, init, g, NoisePlan{0, 2}), InvalidArgument);
}

TEST(IntegrateFrozen, NonFiniteStateAbortsWithStep) {
  const auto op = make_fractional_laplacian(4, 1.0);
  ModelSpec m;
  m.drift.kind = DriftKind::custom;
  m.drift.custom = [](double r) { return r > 1.5 ? std::nan("") : -r; };
  m.noise.K = 0;
  // The constant mode grows at rate eps and crosses the NaN threshold near step 14.
  const EmpiricalMeasure init = EmpiricalMeasure::dirac(2.8 * Field::Unit(4, 0));
  const TimeGrid g = TimeGrid::uniform(0.0, 1.0, 100);
  try {
    integrate_frozen(op, m, 0.5, 0.0, MeasureFlow::constant(init, g.nodes()), init, g, NoisePlan{});
    FAIL() << "expected NumericalAbort";
  } catch (const NumericalAbort& e) {
    EXPECT_GT(e.step, 5u);
    EXPECT_LT(e.step, 30u);
  }
}

TEST(IntegrateFrozen, BitwiseReproducible) {
  const auto op = make_fractional_laplacian(16, 0.5);
  const auto init = sample_initial(op, 32, init_spec(), 4);
  const TimeGrid g = TimeGrid::uniform(0.0, 0.5, 100);
  const MeasureFlow flow = MeasureFlow::constant(init, g.nodes());
  const auto a = integrate_frozen(op, coupled_model(), 0.0, 0.1, flow, init, g, NoisePlan{5, 4});
  const auto b = integrate_frozen(op, coupled_model(), 0.0, 0.1, flow, init, g, NoisePlan{5, 4});
  EXPECT_TRUE(a == b);
  const auto c = integrate_frozen(op, coupled_model(), 0.0, 0.1, flow, init, g, NoisePlan{6, 4});
  EXPECT_FALSE(a == c);
}

TEST(IntegrateInteracting, MeasureFreeEqualsFrozenBitwise) {
  const auto op = make_fractional_laplacian(16, 0.5);
  ModelSpec m = coupled_model();
  m.drift.coupling = CouplingKind::none;
  m.noise.coupling_alpha = 0.0;
  const auto init = sample_initial(op, 16, init_spec(), 5);
  const auto other = sample_initial(op, 16, init_spec(3.0, -2.0), 6);
  const TimeGrid g = TimeGrid::uniform(0.0, 0.5, 100);
  const NoisePlan plan{7, 4};
  const auto inter = integrate_interacting(op, m, 0.0, 0.0, init, g, plan);
  const auto frozen = integrate_frozen(op, m, 0.0, 0.0, MeasureFlow::constant(other, g.nodes()), init, g, plan);
  EXPECT_TRUE(inter == frozen);
}

TEST(IntegrateInteracting, SymmetricPairKeepsZeroMean) {
  const auto op = make_fractional_laplacian(8, 1.0);
  ModelSpec m = linear_decay();
  m.drift.coupling = CouplingKind::mean_shift;
  m.drift.kappa = 1.5;
  const Field x0 = sample_initial(op, 1, init_spec(1.0, 0.7), 8).particle(0);
  const EmpiricalMeasure init(std::vector<Field>{x0, Field(-x0)});
  const TimeGrid g = TimeGrid::uniform(0.0, 1.0, 200);
  const auto traj = integrate_interacting(op, m, 0.0, 0.0, init, g, NoisePlan{});
  for (const auto& s : traj.states) EXPECT_LE(s.rowwise().mean().cwiseAbs().maxCoeff(), 1e-15);
  // Direct two-particle recursion: with zero mean the pair decouples.
  Field x = x0;
  for (std::size_t n = 0; n < g.n_steps; ++n) x = x - g.dt * (op.lambdas().array() * x.array()).matrix();
  EXPECT_LE((traj.terminal().col(0) - x).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(ItoLedger, ZeroModelHasZeroResiduals) {
  const auto op = make_fractional_laplacian(8, 1.0);
  const auto init = sample_initial(op, 4, init_spec(), 9);
  const TimeGrid g = TimeGrid::uniform(0.0, 1.0, 50);
  const auto traj = integrate_frozen(op, zero_model(), 0.0, 0.0, MeasureFlow::constant(init, g.nodes()), init, g,
                                     NoisePlan{0, 0});
  const EnergyReport rep = ito_ledger(traj, zero_model(), op);
  EXPECT_LE(rep.max_residual, 1e-12);
}

TEST(ItoLedger, FirstOrderDefect) {
  const auto op = make_fractional_laplacian(8, 1.0);
  const auto init = sample_initial(op, 4, init_spec(), 10);
  auto run = [&](std::size_t n) {
    const TimeGrid g = TimeGrid::uniform(0.0, 1.0, n);
    const auto traj = integrate_frozen(op, linear_decay(), 0.0, 0.0, MeasureFlow::constant(init, g.nodes()), init, g,
                                       NoisePlan{0, 0});
    return ito_ledger(traj, linear_decay(), op).max_residual;
  };
  const double coarse = run(200), fine = run(400);
  EXPECT_GT(coarse, 0.0);
  EXPECT_NEAR(coarse / fine, 2.0, 0.3);
}

TEST(ItoLedger, NoisyRunResidualShrinksWithDt) {
  const auto op = make_fractional_laplacian(16, 0.5);
  const auto init = sample_initial(op, 64, init_spec(), 11);
  auto run = [&](std::size_t n) {
    const TimeGrid g = TimeGrid::uniform(0.0, 0.5, n);
    const auto traj = integrate_interacting(op, coupled_model(), 0.0, 0.0, init, g, NoisePlan{12, 4});
    return ito_ledger(traj, coupled_model(), op).max_residual;
  };
  EXPECT_LT(run(400), run(100));
}

TEST(ItoLedger, POperatorSignAndProvenance) {
  const auto op = make_fractional_laplacian(8, 1.0);
  const auto init = sample_initial(op, 4, init_spec(), 13);
  const TimeGrid g = TimeGrid::uniform(0.0, 0.2, 20);
  auto traj = integrate_frozen(op, linear_decay(), 0.0, 0.0, MeasureFlow::constant(init, g.nodes()), init, g,
                               NoisePlan{0, 0});
  EXPECT_LE(ito_ledger(traj, linear_decay(), op, nullptr, 2.0).p_check_max, 1e-12);
  traj.noise.reset();
  EXPECT_THROW(ito_ledger(traj, linear_decay(), op), InvalidArgument);
}

TEST(Schemes, DriftImplicitAgreesToFirstOrder) {
  const auto op = make_fractional_laplacian(8, 0.5);
  ModelSpec m = coupled_model();
  m.noise.K = 0;
  const auto init = sample_initial(op, 8, init_spec(), 14);
  std::vector<double> diffs;
  for (std::size_t n : {100u, 200u, 400u}) {
    const TimeGrid g = TimeGrid::uniform(0.0, 1.0, n);
    IntegratorOptions implicit;
    implicit.scheme = StepScheme::drift_implicit;
    const auto a = integrate_interacting(op, m, 0.0, 0.0, init, g, NoisePlan{});
    const auto b = integrate_interacting(op, m, 0.0, 0.0, init, g, NoisePlan{}, implicit);
    diffs.push_back((a.terminal() - b.terminal()).colwise().norm().maxCoeff());
  }
  EXPECT_NEAR(diffs[0] / diffs[1], 2.0, 0.4);
  EXPECT_NEAR(diffs[1] / diffs[2], 2.0, 0.4);
  const double c = diffs[0] / 1e-2;
  EXPECT_LE(diffs[2], 1.2 * c * 2.5e-3);
}

TEST(Moments, SupNormStableUnderParticleDoubling) {
  const auto op = make_fractional_laplacian(16, 0.5);
  const TimeGrid g = TimeGrid::uniform(0.0, 0.5, 250);
  auto sup_mean = [&](std::size_t m) {
    const auto init = sample_initial(op, m, init_spec(), 15);
    const auto traj = integrate_interacting(op, coupled_model(), 0.0, 0.0, init, g, NoisePlan{16, 4});
    Eigen::VectorXd sup = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m));
    for (const auto& s : traj.states) sup = sup.cwiseMax(column_norms_squared(op, Space::L2, s));
    return sup.mean();
  };
  const double a = sup_mean(128), b = sup_mean(256);
  EXPECT_TRUE(std::isfinite(a) && std::isfinite(b));
  EXPECT_LE(std::abs(b - a) / a, 0.2);
}

TEST(SynchronousCoupling, FrozenFlowGapStaysBelowIntegratedDistance) {
  const auto op = make_fractional_laplacian(16, 0.5);
  const auto init = sample_initial(op, 128, init_spec(), 17);
  const TimeGrid g = TimeGrid::uniform(0.0, 1.0, 1000);
  const auto nodes = g.nodes();
  const MeasureFlow mu = MeasureFlow::constant(init, nodes);
  Ensemble shifted = init.particles();
  shifted.row(0).array() += 0.1;
  const MeasureFlow nu = MeasureFlow::constant(EmpiricalMeasure(shifted), nodes);
  const NoisePlan plan{18, 4};
  const auto a = integrate_frozen(op, coupled_model(), 0.0, 0.0, mu, init, g, plan);
  const auto b = integrate_frozen(op, coupled_model(), 0.0, 0.0, nu, init, g, plan);
  const double c_hat = 0.5;
  W2Options exact;
  exact.method = OtMethod::exact;
  const double d2 = std::pow(w2(op, init, EmpiricalMeasure(shifted), exact).value, 2);
  for (std::size_t n = 0; n <= g.n_steps; n += 50) {
    const double t = nodes[n];
    const double lhs = std::exp(-c_hat * t) * column_norms_squared(op, Space::F12Dual, a.states[n] - b.states[n]).mean();
    const double rhs = (1.0 - std::exp(-c_hat * t)) * d2;
    EXPECT_LE(lhs, rhs + 10.0 * g.dt * d2) << "t = " << t;
  }
}

TEST(TrajectoryIo, BinaryAndSidecarRoundTrip) {
  const auto op = make_fractional_laplacian(8, 1.0);
  const auto init = sample_initial(op, 6, init_spec(), 19);
  ModelSpec m = coupled_model();
  const TimeGrid g = TimeGrid::uniform(0.0, 0.1, 10);
  const auto traj = integrate_interacting(op, m, 0.0, 0.2, init, g, NoisePlan{20, 4});
  const auto dir = temp_dir("traj");
  write_trajectory(traj, (dir / "t.bin").string(), (dir / "t.json").string());
  const auto back = read_trajectory((dir / "t.bin").string(), (dir / "t.json").string());
  EXPECT_TRUE(back == traj);
  EXPECT_EQ(back.model_hash, traj.model_hash);
  EXPECT_EQ(back.noise->seed, 20u);
  EXPECT_EQ(back.lam, 0.2);
  EXPECT_EQ(back.grid.dt, traj.grid.dt);

  write_ensemble_stats(traj, op, (dir / "stats.csv").string());
  const auto rows = read_csv((dir / "stats.csv").string());
  ASSERT_EQ(rows.size(), traj.nodes() + 1);
  EXPECT_EQ(parse_double(rows[1][1]), column_norms_squared(op, Space::L2, init.particles()).mean());
}

TEST(InitialLaw, SeededAndShaped) {
  const auto op = make_fractional_laplacian(8, 1.0);
  InitSpec s = init_spec(1.0, 2.0);
  s.modes = 3;
  const auto a = sample_initial(op, 10, s, 1), b = sample_initial(op, 10, s, 1);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(a.particles().bottomRows(5).isZero(0.0));
  EXPECT_NEAR(a.mean()[0], 2.0, 1.0);
}

TEST(ExplicitBound, MatchesFormula) {
  const auto op = make_fractional_laplacian(16, 0.5);
  DriftSpec d;
  d.kind = DriftKind::tanh;
  d.scale = 2.0;
  EXPECT_DOUBLE_EQ(explicit_dt_bound(op, d, 0.1), 1.0 / (2.0 * (8.0 + 0.1)));
}
