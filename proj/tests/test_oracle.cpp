#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "flowlab/oracle.hpp"

using namespace flowlab;

namespace {

Eigen::VectorXd vec2(double a, double b) {
  Eigen::VectorXd v(2);
  v << a, b;
  return v;
}

CounterexampleParams params(double l1, double l2, double width, int dim,
                            double eps = 0.1, double slack = 0.01) {
  return {l1, l2, width, dim, eps, slack};
}

}  // namespace

TEST(AnnulusDensity, OneDimensionalBallIsHalf) {
  AnnulusSpec spec{0.0, 1.0, 1};
  Eigen::VectorXd x(1);
  x << 0.3;
  EXPECT_NEAR(annulus_log_density(spec, x), -std::log(2.0), 1e-12);
  x << -1.0;  // support is [-1, 1]
  EXPECT_NEAR(annulus_log_density(spec, x), -std::log(2.0), 1e-12);
  x << 1.2;
  EXPECT_EQ(annulus_log_density(spec, x), kNegInf);
}

TEST(AnnulusDensity, TwoDimensionalDiskIsOneOverPi) {
  AnnulusSpec spec{0.0, 1.0, 2};
  EXPECT_NEAR(annulus_log_density(spec, vec2(0.2, -0.3)), -std::log(std::numbers::pi), 1e-12);
}

TEST(AnnulusDensity, TwoDimensionalRingArea) {
  AnnulusSpec spec{1.0, 2.0, 2};  // area pi (4 - 1)
  EXPECT_NEAR(annulus_log_density(spec, vec2(1.5, 0.0)), -std::log(3.0 * std::numbers::pi),
              1e-12);
  EXPECT_EQ(annulus_log_density(spec, vec2(0.5, 0.0)), kNegInf);
}

TEST(AnnulusDensity, QuadratureNormalizesLowDim) {
  {
    AnnulusSpec spec{0.5, 1.5, 1};
    const double h = 1e-4;
    double total = 0.0;
    Eigen::VectorXd x(1);
    for (double v = -2.0; v <= 2.0; v += h) {
      x << v;
      const double ld = annulus_log_density(spec, x);
      if (ld != kNegInf) total += std::exp(ld) * h;
    }
    EXPECT_NEAR(total, 1.0, 0.01);
  }
  {
    AnnulusSpec spec{1.0, 2.0, 2};
    const double h = 2.5e-3;
    const double logvol = annulus_log_volume(spec);
    double total = 0.0;
    for (double a = -2.2; a <= 2.2; a += h)
      for (double b = -2.2; b <= 2.2; b += h) {
        const double r = std::hypot(a, b);
        if (r >= spec.inner && r <= spec.outer) total += std::exp(-logvol) * h * h;
      }
    EXPECT_NEAR(total, 1.0, 0.01);
  }
}

TEST(AnnulusSampling, DegenerateShellHasUnitRadius) {
  AnnulusSpec spec{1.0, 1.0 + 1e-9, 3};
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const double r = sample_annulus_point(spec, rng).norm();
    EXPECT_NEAR(r, 1.0, 1e-8);
  }
}

TEST(AnnulusSampling, DiskAreaFraction) {
  AnnulusSpec spec{0.0, 1.0, 2};
  Rng rng(11);
  const long n = 100000;
  long inside = 0;
  for (long i = 0; i < n; ++i)
    if (sample_annulus_point(spec, rng).norm() <= 0.5) ++inside;
  EXPECT_NEAR(static_cast<double>(inside) / n, 0.25, 0.01);
}

TEST(AnnulusSampling, HighDimMassConcentratesInOuterShell) {
  AnnulusSpec spec{0.0, 1.0, 20};
  Rng rng(13);
  const long n = 10000;
  long outer = 0;
  for (long i = 0; i < n; ++i)
    if (sample_annulus_point(spec, rng).norm() > 0.9) ++outer;
  // 1 - 0.9^20 = 0.8784
  EXPECT_GT(static_cast<double>(outer) / n, 0.85);
}

TEST(AnnulusSampling, SamplesStayInSupport) {
  AnnulusSpec spec{1.0, 1.3, 8};
  Rng rng(17);
  for (const auto& x : sample_annulus(spec, 500, rng)) {
    const double r = x.norm();
    EXPECT_GE(r, spec.inner * (1.0 - 1e-12));
    EXPECT_LE(r, spec.outer * (1.0 + 1e-12));
  }
}

TEST(UnitBallPosteriorsTest, EqualWeightsGiveHalf) {
  const auto post = posteriors_in_unit_ball(params(0.3, 0.3, 0.4, 8));
  EXPECT_NEAR(post.data_posterior, 0.5, 1e-15);
}

TEST(UnitBallPosteriorsTest, ClosedFormMatchesBayesFromDensities) {
  // q(0|x) = 1 / (1 + 0.5 * 2^4) = 1/9
  const auto c = params(0.3, 0.5, 1.0, 4);
  const auto post = posteriors_in_unit_ball(c);
  EXPECT_NEAR(post.model_posterior, 1.0 / 9.0, 1e-12);

  Rng rng(23);
  const Eigen::VectorXd x = sample_annulus_point({0.0, 0.99, 4}, rng);
  EXPECT_NEAR(model_posterior0(c, x), post.model_posterior, 1e-12);

  // p(0|x) = 0.2 / 0.22 = 10/11
  const auto c2 = params(0.2, 0.02, 0.4, 6);
  const auto post2 = posteriors_in_unit_ball(c2);
  EXPECT_NEAR(post2.data_posterior, 10.0 / 11.0, 1e-12);
  const Eigen::VectorXd x2 = sample_annulus_point({0.0, 0.99, 6}, rng);
  EXPECT_NEAR(data_posterior0(c2, x2), post2.data_posterior, 1e-12);
}

TEST(UnitBallPosteriorsTest, BothWeightsZeroIsAnError) {
  EXPECT_THROW(posteriors_in_unit_ball(params(0.0, 0.0, 0.4, 8)), std::invalid_argument);
}

TEST(ClosedFormKl, MatchedBallMassZeroesFirstTerm) {
  // lambda1 = (1+w)^-d makes the ball log-ratio vanish in KL(p||q).
  const double w = 0.5;
  const int d = 6;
  const double l1 = std::exp(-d * std::log1p(w));
  const auto c = params(l1, 0.1, w, d);
  const double expected_second_term =
      (1.0 - l1) * (std::log1p(-l1) - std::log1p(-std::exp(-d * std::log1p(w))));
  EXPECT_NEAR(kl_data_vs_model(c), expected_second_term, 1e-14);
}

TEST(ClosedFormKl, DegenerateLambdaOneIsPureVolumeRatio) {
  const auto c = params(1.0, 0.1, 0.5, 7);
  EXPECT_NEAR(kl_data_vs_model(c), 7 * std::log1p(0.5), 1e-12);
  EXPECT_EQ(kl_model_vs_data(c), kPosInf);  // q has shell mass where p(.|0) has none
  const auto c0 = params(0.0, 0.1, 0.5, 7);
  EXPECT_EQ(kl_model_vs_data(c0), kPosInf);
  EXPECT_TRUE(std::isfinite(kl_data_vs_model(c0)));
}

TEST(ClosedFormKl, FrozenExampleValue) {
  // d=10, w=0.5, lambda1=0.05: KL(q||p) = 0.014850 (hand-checked two-region sum)
  const auto c = params(0.05, 0.01, 0.5, 10);
  EXPECT_NEAR(kl_model_vs_data(c), 0.01485, 2e-4);
  EXPECT_GE(kl_model_vs_data(c), 0.0);
  EXPECT_GE(kl_data_vs_model(c), 0.0);
}

TEST(McKl, AgreesWithClosedFormOnFrozenExample) {
  const auto c = params(0.05, 0.01, 0.5, 10);
  Rng rng(101);
  const auto est = mc_kl(c, KlDirection::kModelVsData, 1000000, rng);
  EXPECT_NEAR(est.estimate, kl_model_vs_data(c), 2.0 * est.std_error + 1e-12);
}

TEST(McKl, IdenticalDistributionsEstimateZero) {
  const double w = 0.4;
  const int d = 5;
  const double l1 = std::exp(-d * std::log1p(w));  // p(x|0) == q(x|0)
  const auto c = params(l1, 0.05, w, d);
  Rng rng(57);
  const auto est = mc_kl(c, KlDirection::kDataVsModel, 2000, rng);
  EXPECT_NEAR(est.estimate, 0.0, 3.0 * est.std_error + 1e-12);
}

TEST(McKl, DegenerateLambdaOneIsExactVolumeRatio) {
  const auto c = params(1.0, 0.05, 0.5, 8);
  Rng rng(33);
  const auto est = mc_kl(c, KlDirection::kDataVsModel, 2000, rng);
  EXPECT_NEAR(est.estimate, 8 * std::log1p(0.5), 3.0 * est.std_error + 1e-12);
}

TEST(McKl, RejectsTinySampleCounts) {
  Rng rng(1);
  EXPECT_THROW(mc_kl(params(0.1, 0.01, 0.5, 4), KlDirection::kDataVsModel, 10, rng),
               std::invalid_argument);
}

TEST(SolveDimension, FrozenReferenceSolution) {
  const auto sol = solve_dimension(0.1, 0.01, 0.3);
  EXPECT_EQ(sol.dim, 54);
  EXPECT_NEAR(sol.lambda1_lo, 6.88e-3, 0.05e-3);
  EXPECT_NEAR(sol.lambda1_hi, 7.06e-3, 0.05e-3);
  EXPECT_LT(sol.lambda1_lo, sol.lambda1_hi);
  EXPECT_NEAR(sol.lambda1, 0.5 * (sol.lambda1_lo + sol.lambda1_hi), 1e-15);
  EXPECT_NEAR(sol.lambda2, sol.lambda1 * 0.01 / 0.99, 1e-12);
  EXPECT_TRUE(sol.feasible);
  for (bool cond : sol.conditions) EXPECT_TRUE(cond);
  // interval endpoints satisfy their defining formulas
  EXPECT_NEAR(sol.lambda1_hi, 0.1 / (54 * std::log1p(0.3)), 1e-12);
  EXPECT_NEAR(sol.lambda1_lo, std::exp(2.0 * std::log(99.0) - 54 * std::log1p(0.3)), 1e-12);
}

TEST(SolveDimension, WideShellNeedsFewDimensions) {
  const auto sol = solve_dimension(0.1, 0.01, 10.0);
  EXPECT_EQ(sol.dim, 6);
  EXPECT_TRUE(sol.feasible);
}

TEST(SolveDimension, RelaxingKlBoundNeverRaisesDimension) {
  int prev = solve_dimension(0.05, 0.01, 0.3).dim;
  for (double eps : {0.1, 0.2, 0.5, 1.0}) {
    const int d = solve_dimension(eps, 0.01, 0.3).dim;
    EXPECT_LE(d, prev);
    prev = d;
  }
}

TEST(SolveDimension, SolutionsSatisfyBothKlBounds) {
  for (double eps : {0.05, 0.1, 0.3}) {
    for (double width : {0.2, 0.5, 1.0}) {
      const auto sol = solve_dimension(eps, 0.02, width);
      const auto c = sol.params(eps, 0.02, width);
      EXPECT_LT(kl_model_vs_data(c), eps);
      EXPECT_LT(kl_data_vs_model(c), eps);
      const auto post = posteriors_in_unit_ball(c);
      EXPECT_GE(post.data_posterior, 1.0 - 0.02 - 1e-9);
      EXPECT_LE(post.model_posterior, 0.02 + 1e-9);
    }
  }
}

TEST(ConstructAdversarial, RadialDistances) {
  const double w = 0.4;
  Rng rng(71);
  Eigen::VectorXd dir = rng.unit_vector(6);

  const Eigen::VectorXd outer = (1.0 + w) * dir;
  const Eigen::VectorXd adv1 = construct_adversarial(outer, w);
  EXPECT_NEAR((outer - adv1).norm(), w + kInteriorOffset, 1e-12);
  EXPECT_LT(adv1.norm(), 1.0);

  const Eigen::VectorXd inner = dir;
  const Eigen::VectorXd adv2 = construct_adversarial(inner, w);
  EXPECT_NEAR((inner - adv2).norm(), kInteriorOffset, 1e-12);

  EXPECT_THROW(construct_adversarial(0.5 * dir, w), std::invalid_argument);
  EXPECT_THROW(construct_adversarial(2.0 * dir, w), std::invalid_argument);
}

TEST(ConstructAdversarial, ModelDensityNeverDecreases) {
  const auto sol = solve_dimension(0.1, 0.01, 0.3);
  const auto c = sol.params(0.1, 0.01, 0.3);
  Rng rng(91);
  AnnulusSpec shell{1.0, 1.0 + c.shell_width, c.dim};
  for (int i = 0; i < 200; ++i) {
    const Eigen::VectorXd x = sample_annulus_point(shell, rng);
    const Eigen::VectorXd adv = construct_adversarial(x, c.shell_width);
    EXPECT_GE(model_log_marginal(c, adv), model_log_marginal(c, x));
  }
}

TEST(VerifyProposition, ReferenceParametersPass) {
  const auto sol = solve_dimension(0.1, 0.01, 0.3);
  const auto c = sol.params(0.1, 0.01, 0.3);
  Rng rng(301);
  const auto report = verify_proposition(c, 20000, rng);
  EXPECT_TRUE(report.feasible);
  EXPECT_TRUE(report.pass);
  EXPECT_GT(report.interval.lo, 1.0 / 3.0);
  // shell mass of class 0 is (1 - lambda1)/2 and every shell point attacks;
  // tolerance is 4 binomial sigmas at n = 20000
  const double expected = 0.5 * (1.0 - c.lambda1);
  EXPECT_NEAR(report.fraction, expected, 4.0 * std::sqrt(0.25 / 20000.0));
  EXPECT_EQ(report.n_success, report.n_eligible);
  EXPECT_EQ(report.n_success, report.n_above_median);
  EXPECT_LE(report.n_success, report.n_eligible);
  EXPECT_GE(report.n_confident_at_origin, report.n_flip_confident);
}

TEST(VerifyProposition, DegenerateWeightsAreInfeasible) {
  const auto c = params(0.999, 0.2, 0.3, 54);
  Rng rng(303);
  const auto report = verify_proposition(c, 5000, rng);
  EXPECT_FALSE(report.feasible);
  EXPECT_LT(report.fraction, 0.05);  // shell mass vanished
  EXPECT_FALSE(report.pass);
}

TEST(VerifyProposition, BallMassProbeRunsInLowDim) {
  const auto c = params(0.1, 0.001, 0.3, 12, 1.0, 0.01);
  Rng rng(305);
  const auto report = verify_proposition(c, 4000, rng);
  EXPECT_TRUE(report.ball_mass_checked);
  EXPECT_LT(report.max_ball_mass, 0.2);
}

TEST(WilsonIntervalTest, BracketsPointEstimate) {
  for (long k : {0L, 10L, 500L, 1000L}) {
    const auto ci = wilson_interval(k, 1000);
    const double phat = k / 1000.0;
    EXPECT_LE(ci.lo, phat + 1e-12);
    EXPECT_GE(ci.hi, phat - 1e-12);
    EXPECT_GE(ci.lo, 0.0);
    EXPECT_LE(ci.hi, 1.0);
  }
}

TEST(ParamsValidation, RejectsOutOfRange) {
  EXPECT_THROW(params(-0.1, 0.5, 0.3, 5).validate(), std::invalid_argument);
  EXPECT_THROW(params(0.1, 0.5, -0.3, 5).validate(), std::invalid_argument);
  EXPECT_THROW(params(0.1, 0.5, 0.3, 0).validate(), std::invalid_argument);
  EXPECT_THROW(params(0.1, 0.5, 0.3, 5, 0.1, 0.7).validate(), std::invalid_argument);
}
