// Copyright (c) 2026 The decopt authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "decopt/oracle.hpp"

using namespace decopt;

namespace {

Vector random_vector(int d, Rng& rng, double scale = 1.0) {
  Vector v(d);
  for (int k = 0; k < d; ++k) v(k) = scale * rng.normal();
  return v;
}

Vector finite_difference(const ObjectiveSuite& s, int i, const Vector& x, double h = 1e-6) {
  Vector g(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    Vector xp = x, xm = x;
    xp(k) += h;
    xm(k) -= h;
    g(k) = (s.local_value(i, xp) - s.local_value(i, xm)) / (2 * h);
  }
  return g;
}

ObjectiveSuite identical_quadratics(int n, const Matrix& b, const Vector& c) {
  return ObjectiveSuite(ObjectiveFamily::het_quadratic, std::vector<AgentData>(static_cast<std::size_t>(n), {b, c}));
}

}  // namespace

TEST(Objective, QuadraticGradientVanishesAtSolution) {
  Rng rng(1);
  Matrix b(6, 4);
  for (int r = 0; r < 6; ++r)
    for (int k = 0; k < 4; ++k) b(r, k) = rng.normal();
  const Vector x = random_vector(4, rng);
  const auto s = identical_quadratics(1, b, b * x);
  EXPECT_LT(s.local_grad(0, x).norm(), 1e-13);
}

TEST(Objective, RobustGradientVanishesAtZeroResidual) {
  Rng rng(2);
  Matrix a(10, 3);
  for (int r = 0; r < 10; ++r)
    for (int k = 0; k < 3; ++k) a(r, k) = rng.normal();
  const Vector x = random_vector(3, rng);
  const ObjectiveSuite s(ObjectiveFamily::robust_regression, {{a, a * x}});
  EXPECT_LT(s.local_grad(0, x).norm(), 1e-15);
}

TEST(Objective, GradientsMatchFiniteDifferences) {
  for (auto fam : {ObjectiveFamily::het_quadratic, ObjectiveFamily::robust_regression}) {
    const auto s = generate_suite(fam, 4, 12, 30, 1.0, 9);
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      const int i = trial % 4;
      const Vector x = random_vector(12, rng);
      const Vector g = s.local_grad(i, x);
      const Vector fd = finite_difference(s, i, x);
      EXPECT_LE((g - fd).norm(), 1e-5 * std::max(1.0, g.norm())) << to_string(fam) << " trial " << trial;
    }
  }
}

TEST(Objective, GlobalIsMeanOfLocals) {
  const auto s = generate_suite(ObjectiveFamily::robust_regression, 5, 7, 20, 2.0, 4);
  Rng rng(5);
  const Vector x = random_vector(7, rng);
  Vector g = Vector::Zero(7);
  double v = 0.0;
  for (int i = 0; i < 5; ++i) {
    g += s.local_grad(i, x);
    v += s.local_value(i, x);
  }
  EXPECT_LT((s.global_grad(x) - g / 5).norm(), 1e-12);
  EXPECT_NEAR(s.global_value(x), v / 5, 1e-12);
}

TEST(Objective, SingleAndIdenticalAgentsReduceToLocal) {
  Rng rng(6);
  Matrix b(5, 3);
  for (int r = 0; r < 5; ++r)
    for (int k = 0; k < 3; ++k) b(r, k) = rng.normal();
  const Vector c = random_vector(5, rng);
  const Vector x = random_vector(3, rng);
  const auto one = identical_quadratics(1, b, c);
  const auto many = identical_quadratics(6, b, c);
  EXPECT_EQ(one.global_grad(x), one.local_grad(0, x));
  EXPECT_LT((many.global_grad(x) - many.local_grad(3, x)).norm(), 1e-13);
  EXPECT_NEAR(many.global_value(x), many.local_value(2, x), 1e-13);
}

TEST(Objective, SmoothnessConstantExamples) {
  EXPECT_NEAR(identical_quadratics(3, Matrix::Identity(4, 4), Vector::Zero(4)).smoothness_constant(), 1.0, 1e-12);
  EXPECT_NEAR(identical_quadratics(3, 2 * Matrix::Identity(4, 4), Vector::Zero(4)).smoothness_constant(), 4.0, 1e-12);
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 6, 10, 25, 1.0, 8);
  double ref = 0.0;
  for (int i = 0; i < 6; ++i) {
    const Matrix& b = s.agent(i).rows;
    Eigen::SelfAdjointEigenSolver<Matrix> es(b.transpose() * b);
    ref = std::max(ref, es.eigenvalues().maxCoeff());
  }
  EXPECT_NEAR(s.smoothness_constant(), ref, 1e-8);
}

TEST(Objective, SmoothnessWitness) {
  for (auto fam : {ObjectiveFamily::het_quadratic, ObjectiveFamily::robust_regression}) {
    const auto s = generate_suite(fam, 3, 8, 40, 1.5, 10);
    const double L = s.smoothness_constant();
    Rng rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
      const int i = trial % 3;
      const Vector x = random_vector(8, rng, 3.0), y = random_vector(8, rng, 3.0);
      EXPECT_LE((s.local_grad(i, x) - s.local_grad(i, y)).norm(), L * (x - y).norm() * (1 + 1e-12));
    }
  }
}

TEST(Objective, QuadraticMinimizerIsStationary) {
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 4, 6, 20, 1.0, 12);
  EXPECT_LT(s.global_grad(s.quadratic_minimizer()).norm(), 1e-10);
  EXPECT_GE(s.global_value(s.quadratic_minimizer()), s.f_star_lower());
}

TEST(Objective, SuiteRoundTrip) {
  for (auto fam : {ObjectiveFamily::het_quadratic, ObjectiveFamily::robust_regression}) {
    const auto s = generate_suite(fam, 3, 4, 5, 1.0, 13);
    std::stringstream ss;
    write_suite(ss, s);
    const auto back = read_suite(ss);
    EXPECT_EQ(back.family(), fam);
    for (int i = 0; i < 3; ++i) {
      EXPECT_EQ(back.agent(i).rows, s.agent(i).rows);
      EXPECT_EQ(back.agent(i).targets, s.agent(i).targets);
    }
    EXPECT_DOUBLE_EQ(back.smoothness_constant(), s.smoothness_constant());
  }
}

TEST(Noise, RejectsInvalidParameters) {
  EXPECT_THROW(NoiseModel::make(1.0, 1.0), InvalidArgument);
  EXPECT_THROW(NoiseModel::make(2.5, 1.0), InvalidArgument);
  EXPECT_THROW(NoiseModel::make(1.5, -1.0), InvalidArgument);
  EXPECT_THROW(NoiseModel::make(1.5, 1.0, 1.4), InvalidArgument);
  EXPECT_DOUBLE_EQ(NoiseModel::make(1.5, 1.0).a, 1.75);
  EXPECT_DOUBLE_EQ(NoiseModel::make(2.0, 1.0).a, 3.0);
}

TEST(Noise, ParetoScaleGivesExactMoment) {
  for (double p : {1.2, 1.5, 2.0}) {
    const auto m = NoiseModel::make(p, 1.7);
    // E s^p = a x_m^p / (a - p) for Pareto(x_m, a).
    EXPECT_NEAR(m.a * std::pow(m.scale(), p) / (m.a - p), std::pow(1.7, p), 1e-12);
  }
  // p = 2, a = 3: E s^2 = 3 x_m^2.
  const auto m = NoiseModel::make(2.0, 1.0, 3.0);
  EXPECT_NEAR(3.0 * m.scale() * m.scale(), 1.0, 1e-15);
}

// The default tail index leaves ||delta||^p with infinite variance, so sample
// means of it do not concentrate. Empirical calibration therefore uses a = 2p + 1.
TEST(Noise, EmpiricalMomentCalibration) {
  for (double p : {1.2, 1.5, 2.0}) {
    const auto m = NoiseModel::make(p, 1.0, 2 * p + 1);
    Rng rng(21);
    double acc = 0.0;
    const int N = 1'000'000;
    for (int k = 0; k < N; ++k) acc += std::pow(heavy_tail_draw(m, 4, rng).norm(), p);
    EXPECT_NEAR(acc / N, 1.0, 0.03) << "p = " << p;
  }
}

TEST(Noise, SphericalMeanIsZero) {
  const auto m = NoiseModel::make(1.5, 1.0);
  Rng rng(22);
  Vector acc = Vector::Zero(5);
  const int N = 1'000'000;
  for (int k = 0; k < N; ++k) acc += heavy_tail_draw(m, 5, rng);
  acc /= N;
  for (int j = 0; j < 5; ++j) EXPECT_LT(std::abs(acc(j)), 5e-2);
}

TEST(Noise, DrawIsDeterministicGivenStream) {
  const auto m = NoiseModel::make(1.5, 2.0);
  Rng a(5), b(5);
  for (int k = 0; k < 10; ++k) EXPECT_EQ(heavy_tail_draw(m, 7, a), heavy_tail_draw(m, 7, b));
}

TEST(BatchGradient, NoiselessAndSingleSample) {
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 2, 5, 10, 1.0, 14);
  Rng rng(1);
  const Vector x = random_vector(5, rng);
  const auto quiet = NoiseModel::make(1.5, 0.0);
  std::int64_t samples = 0;
  EXPECT_EQ(stochastic_batch_grad(s, 1, x, quiet, 8, rng, &samples), s.local_grad(1, x));
  EXPECT_EQ(samples, 8);

  const auto loud = NoiseModel::make(1.5, 1.0);
  Rng r1(7), r2(7);
  const Vector g = stochastic_batch_grad(s, 0, x, loud, 1, r1);
  EXPECT_LT((g - (s.local_grad(0, x) + heavy_tail_draw(loud, 5, r2))).norm(), 1e-15);
  EXPECT_THROW(stochastic_batch_grad(s, 0, x, loud, 0, r1), InvalidArgument);
}

TEST(BatchGradient, ErrorWithinBatchBound) {
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 1, 8, 10, 1.0, 15);
  const Vector x = Vector::Zero(8);
  const Vector exact = s.local_grad(0, x);
  const auto m = NoiseModel::make(1.5, 1.0);
  Rng rng(23);
  const int trials = 10000;
  double acc = 0.0;
  for (int t = 0; t < trials; ++t) acc += (stochastic_batch_grad(s, 0, x, m, 64, rng) - exact).norm();
  const double bound = 2 * std::sqrt(2.0) / std::pow(64.0, 1 - 1 / 1.5);
  EXPECT_LE(acc / trials, 1.1 * bound);
}

TEST(BatchGradient, UnbiasedFiniteVariance) {
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 1, 6, 10, 1.0, 16);
  Rng rng(24);
  const Vector x = random_vector(6, rng);
  const Vector exact = s.local_grad(0, x);
  const auto m = NoiseModel::make(2.0, 1.0);
  const int trials = 10000, b = 4;
  Vector acc = Vector::Zero(6);
  for (int t = 0; t < trials; ++t) acc += stochastic_batch_grad(s, 0, x, m, b, rng);
  acc /= trials;
  // Each coordinate has variance sigma^2 / (d b trials).
  EXPECT_LE((acc - exact).norm(), 4.0 / std::sqrt(static_cast<double>(trials) * b) * std::sqrt(6.0));
}

TEST(BatchGradient, UnbiasedHeavyTailMedianOfMeans) {
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 1, 6, 10, 1.0, 17);
  Rng rng(25);
  const Vector x = random_vector(6, rng);
  const Vector exact = s.local_grad(0, x);
  const auto m = NoiseModel::make(1.5, 1.0);
  const int groups = 100, per = 100;
  Vector mom(6);
  std::vector<std::vector<double>> means(6);
  for (int g = 0; g < groups; ++g) {
    Vector acc = Vector::Zero(6);
    for (int t = 0; t < per; ++t) acc += stochastic_batch_grad(s, 0, x, m, 1, rng);
    acc /= per;
    for (int j = 0; j < 6; ++j) means[static_cast<std::size_t>(j)].push_back(acc(j));
  }
  for (int j = 0; j < 6; ++j) {
    auto& v = means[static_cast<std::size_t>(j)];
    std::nth_element(v.begin(), v.begin() + groups / 2, v.end());
    mom(j) = v[groups / 2];
  }
  EXPECT_LE((mom - exact).norm(), 0.1 * std::max(1.0, exact.norm()));
}
