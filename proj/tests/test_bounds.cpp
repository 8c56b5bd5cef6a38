#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ccl/bounds.hpp"
#include "ccl/data.hpp"
#include "ccl/fixtures.hpp"

using namespace ccl;

namespace {

// 40-digit reference values of the closed forms
constexpr double kAlpha1 = 1.7615941559557648881;
constexpr double kBeta1 = 0.014810201563845972046;
constexpr double kBetaPrime1 = -5.5083781103476838042;
constexpr double kEll2 = 0.12692801104297249;

std::vector<MixtureWeights> example(WeightRule rule, int T, double rho = 1.0) {
  ScenarioSpec s;
  s.tasks = T;
  s.weights = rule;
  s.rho = rho;
  return scenario_weights(s);
}

}  // namespace

TEST(Constants, HighPrecisionValues) {
  const auto c = constants(1);
  EXPECT_NEAR(c.alpha, kAlpha1, 1e-15);
  EXPECT_NEAR(c.beta, kBeta1, 1e-15);
  EXPECT_NEAR(c.beta_prime, kBetaPrime1, 1e-14);
  EXPECT_NEAR(c.alpha, 1.0 + std::tanh(1.0), 1e-15);
  EXPECT_NEAR(beta_prime_single(c.alpha), c.beta_prime, 1e-12);
  EXPECT_GT(c.alpha, 1.0);
  EXPECT_GT(c.beta, 0.0);
  EXPECT_LT(c.beta_prime, 0.0);

  const auto c2 = constants(2);
  EXPECT_NEAR(c2.alpha, 1.573972084323197, 1e-14);
  EXPECT_NEAR(c2.beta, 0.048991140697832, 1e-14);
  EXPECT_NEAR(c2.beta_prime, -6.215238780006528, 1e-13);
  const auto c5 = constants(5);
  EXPECT_NEAR(c5.alpha, 1.192836006218170, 1e-14);
  EXPECT_NEAR(c5.beta, 0.190690230258555, 1e-14);
  EXPECT_NEAR(c5.beta_prime, -6.284617363794220, 1e-13);
}

TEST(Constants, AccumulationFactorAtTwoIsOne) {
  for (int k : {1, 2, 5}) EXPECT_NEAR(accumulation_factor(2, constants(k).alpha), 1.0, 1e-14);
}

TEST(SingleStepSandwich, ConstantModelSlack) {
  const ConstantModel f(normalize(Vector{1.0, 0.0}));
  const auto d = TaskDistribution::uniform({{0.0}, {1.0}}, {0, 1});
  const auto s = lemma1_slack(f, f, d, 1);
  // alpha log2 + log2 + beta - log2
  EXPECT_NEAR(s.upper, 1.2358542240554610, 1e-12);
  EXPECT_GE(s.lower, 0.0);
}

TEST(SingleStepSandwich, RandomSandwich) {
  std::mt19937_64 rng(21);
  for (int k : {1, 2, 5}) {
    for (int trial = 0; trial < 60; ++trial) {
      const auto d = random_distribution(2 + trial % 3, 3, rng);
      const auto ft = random_table_model(d, 3, rng);
      const auto fp = random_table_model(d, 3, rng);
      const auto s = lemma1_slack(ft, fp, d, k);
      EXPECT_GE(s.upper, -1e-10);
      EXPECT_GE(s.lower, -1e-10);
    }
  }
}

TEST(Gamma, DirectFormula) {
  const auto g = gamma(2, 1.0, MixtureWeights(2, {1.0}));
  EXPECT_DOUBLE_EQ(g.gamma, 0.5);
  EXPECT_DOUBLE_EQ(g.gamma_prime, 1.0);
  EXPECT_EQ(gamma(2, 0.0, MixtureWeights(2, {1.0})).gamma, 0.0);
  const auto w = example(WeightRule::example1, 5);
  EXPECT_DOUBLE_EQ(gamma(5, 1.0, w.back()).gamma, 0.2);
}

TEST(MinCon, Surrogates) {
  const auto two = TaskDistribution::uniform({{-1.0}, {1.0}}, {0, 1});
  EXPECT_NEAR(min_con_surrogate(two, 1, SurrogateMode::analytic), kEll2, 1e-15);
  const double opt = min_con_surrogate(two, 1, SurrogateMode::optimized);
  EXPECT_GE(opt, kEll2 - 1e-12);
  EXPECT_LE(opt, std::log(2.0) + 1e-12);
  const auto one = TaskDistribution::uniform({{0.0}, {1.0}}, {0, 0});
  EXPECT_LE(min_con_surrogate(one, 1, SurrogateMode::optimized), std::log(2.0) + 1e-12);
}

TEST(SequenceBound, TwoTaskUpperAndLower) {
  BoundInputs in;
  const double L = 0.7;
  in.train_losses = {L, L};
  in.weights = {MixtureWeights(2, {1.0})};
  in.lambdas = {1.0};
  const auto r = theorem1_bounds(in, 1);
  const double a = kAlpha1;
  EXPECT_NEAR(*r.upper, a * L + 2.0 * L - 0.1121178094791265, 1e-12);
  EXPECT_NEAR(*r.lower, a * L + L + kBetaPrime1, 1e-12);
}

TEST(SequenceBound, LargeLambdaFreezesCoefficients) {
  BoundInputs in;
  in.train_losses = {1.0, 1.0, 1.0, 1.0};
  in.weights = example(WeightRule::example1, 4);
  in.lambdas = {1e6};
  const auto r = theorem1_upper(in, 1);
  const double a = kAlpha1;
  for (int t = 2; t <= 4; ++t) EXPECT_NEAR(r.upper_coefficients[t - 1], std::pow(a, 4 - t) * t, 1e-12);
}

TEST(SequenceBound, ZeroGammaNamesTask) {
  BoundInputs in;
  in.train_losses = {1.0, 1.0, 1.0};
  in.weights = example(WeightRule::example1, 3);
  in.lambdas = {1.0, 0.0};
  try {
    theorem1_upper(in, 1);
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("task 3"), std::string::npos);
  }
}

TEST(SequenceBound, ConstantModelsLowerBelowTLog2) {
  const double l2 = std::log(2.0);
  for (int T : {2, 3, 5}) {
    BoundInputs in;
    in.train_losses.assign(T, l2);
    for (int t = 2; t <= T; ++t) in.train_losses[t - 1] = 2.0 * l2;
    in.weights = example(WeightRule::example1, T);
    in.lambdas = {1.0};
    EXPECT_LE(*theorem1_lower(in, 1).lower, T * l2);
    EXPECT_GE(*theorem1_upper(in, 1).upper, T * l2);
  }
}

TEST(SequenceBound, GeneralKConstants) {
  BoundInputs in;
  in.train_losses = {1.0, 1.0, 1.0};
  in.weights = example(WeightRule::example1, 3);
  in.lambdas = {1.0};
  const auto c = constants(2);
  const auto r = theorem1_lower(in, 2);
  EXPECT_NEAR(*r.eta_prime, c.beta_prime * accumulation_factor(3, c.alpha), 1e-14);
}

TEST(ComputeU, Values) {
  const std::vector<double> l2{0.0, 3.0};
  const std::vector<MixtureWeights> w2{MixtureWeights(2, {1.0})};
  EXPECT_NEAR(compute_U(l2, 1.0, w2, 1), 3.0 / 0.5, 1e-14);
  const std::vector<double> l3{1.0, 1.0, 1.0};
  const std::vector<MixtureWeights> w3{MixtureWeights(2, {1.0}), MixtureWeights::uniform(3)};
  EXPECT_NEAR(compute_U(l3, 1.0, w3, 1), 6.5231883119115298, 1e-12);
}

TEST(ComputeU, MonotoneInLambda) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.05, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int t = 2 + trial % 5;
    std::vector<double> losses;
    std::vector<MixtureWeights> w;
    for (int j = 1; j <= t; ++j) losses.push_back(u(rng));
    for (int j = 2; j <= t; ++j) {
      std::vector<double> row;
      double s = 0.0;
      for (int i = 1; i < j; ++i) s += (row.emplace_back(u(rng)));
      for (double& x : row) x /= s;
      w.emplace_back(j, row);
    }
    const double lam = u(rng);
    EXPECT_LE(compute_U(losses, lam + u(rng), w, 1), compute_U(losses, lam, w, 1) + 1e-12);
  }
}

TEST(ThresholdSchedule, StepRule) {
  ScheduleState s;
  s.t = 3;
  s.lambda = 1.0;
  s.thresholds = {3.0};
  s.deltas = {0.5};
  EXPECT_DOUBLE_EQ(theorem2_step(s, 5.0).lambda, 1.5);
  EXPECT_DOUBLE_EQ(theorem2_step(s, 2.0).lambda, 1.0);
  EXPECT_EQ(theorem2_step(s, 2.0).t, 4);
}

TEST(TurningPoint, Examples) {
  EXPECT_EQ(turning_point(example(WeightRule::example1, 5)), 1.0);
  EXPECT_EQ(turning_point(example(WeightRule::example3, 5)), 10.0);
  for (double rho : {0.95, 1.05}) EXPECT_NEAR(turning_point(example(WeightRule::example2, 5, rho)), rho, 1e-12);
}

TEST(TurningPoint, CurveShape) {
  for (auto rule : {WeightRule::example1, WeightRule::example2, WeightRule::example3}) {
    BoundInputs in;
    in.train_losses.assign(5, 1.0);
    in.weights = example(rule, 5, 1.05);
    in.lambdas = {1.0};
    const auto grid = linear_grid(0.01, 20.0, 400);
    const auto curve = bound_curve(in, grid, 1);
    const double star = turning_point(in.weights);
    ASSERT_EQ(curve.size(), grid.size());
    for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_LE(curve[i].upper, curve[i - 1].upper + 1e-12);
    for (const auto& p : curve)
      if (p.lambda >= star) {
        EXPECT_NEAR(p.upper, curve.back().upper, 1e-12);
      }
    EXPECT_NEAR(turning_point_sweep(curve), star, grid[1] - grid[0]);
  }
}

TEST(BoundCurve, SkipsZeroGamma) {
  BoundInputs in;
  in.train_losses = {1.0, 1.0};
  in.weights = {MixtureWeights(2, {1.0})};
  in.lambdas = {1.0};
  const std::vector<double> grid{0.0, 1.0};
  std::vector<double> skipped;
  const auto curve = bound_curve(in, grid, 1, &skipped);
  EXPECT_EQ(curve.size(), 1u);
  EXPECT_EQ(skipped, std::vector<double>{0.0});
}
