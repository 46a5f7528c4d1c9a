// Copyright (c) 2026 The decopt authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "decopt/algos.hpp"
#include "decopt/metrics.hpp"

using namespace decopt;

namespace {

MixingMatrix exp8() { return assign_weights(build_topology(TopologyKind::directed_exponential, 8), WeightScheme::uniform_out()); }

MixingMatrix lazy_ring(int n) {
  return assign_weights(build_topology(TopologyKind::undirected_ring, n), WeightScheme::lazy_metropolis());
}

MixingMatrix single() { return assign_weights(build_topology(TopologyKind::directed_ring, 1), WeightScheme::uniform_out()); }

// Every agent holds the same quadratic.
ObjectiveSuite homogeneous(int n, int d, std::uint64_t seed) {
  const auto base = generate_suite(ObjectiveFamily::het_quadratic, 1, d, 3 * d, 1.0, seed);
  return ObjectiveSuite(ObjectiveFamily::het_quadratic,
                        std::vector<AgentData>(static_cast<std::size_t>(n), base.agent(0)));
}

RunParams params(double eta, std::int64_t b, std::int64_t K, std::int64_t K_hat) {
  RunParams p;
  p.eta = eta;
  p.b = b;
  p.K = K;
  p.K_hat = K_hat;
  p.T = 1;
  return p;
}

double pd_tracking_residual(const PdState& s, const Vector& pi) {
  const Vector lhs = s.v.transpose() * pi;
  const Vector rhs = s.g.transpose() * pi.cwiseProduct(s.d_cur.cwiseInverse());
  return (lhs - rhs).norm() / (1.0 + s.g.norm());
}

double mean_tracking_residual(const UnState& s) {
  return (s.v.colwise().mean() - s.g.colwise().mean()).norm() / (1.0 + s.g.norm());
}

}  // namespace

TEST(NormalizeRows, Examples) {
  Matrix v(3, 2);
  v << 2, 0, 3, 4, 0, 0;
  const Matrix u = normalize_rows(v);
  EXPECT_DOUBLE_EQ(u(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(u(1, 0), 0.6);
  EXPECT_DOUBLE_EQ(u(1, 1), 0.8);
  EXPECT_EQ(u.row(2).norm(), 0.0);
  std::int64_t zeros = 0;
  normalize_rows(v, &zeros);
  EXPECT_EQ(zeros, 1);
}

TEST(NormalizeRows, RandomRowsAreUnitOrZero) {
  Rng rng(1);
  Matrix v(50, 7);
  for (int i = 0; i < 50; ++i)
    for (int j = 0; j < 7; ++j) v(i, j) = rng.normal() * std::pow(10.0, (i % 20) - 10);
  v.row(3).setZero();
  v.row(4).setConstant(1e-310);
  const Matrix u = normalize_rows(v);
  for (int i = 0; i < 50; ++i) {
    const double nrm = u.row(i).norm();
    EXPECT_TRUE(nrm == 0.0 || std::abs(nrm - 1.0) <= 1e-12) << i;
  }
  EXPECT_EQ(u.row(4).norm(), 0.0);
}

TEST(PullDiag, SingleAgentInit) {
  const auto m = single();
  const auto prof = spectral_profile(m);
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 1, 4, 10, 1.0, 2);
  const auto noise = NoiseModel::make(1.5, 1.0);
  auto rngs = agent_streams(3, 1);
  const auto st = dnsgd_pd_init(m, prof, s, noise, params(0.1, 5, 3, 3), Vector::Zero(4), rngs);
  EXPECT_DOUBLE_EQ(st.d_cur(0), 1.0);
  EXPECT_EQ(st.v, st.g);
  EXPECT_EQ(st.counters.samples, 5);
  EXPECT_EQ(st.counters.comms, 3);
}

TEST(PullDiag, RejectsKBelowMixingThreshold) {
  const auto m = exp8();
  const auto prof = spectral_profile(m);
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 8, 4, 10, 1.0, 2);
  auto rngs = agent_streams(3, 8);
  EXPECT_THROW(dnsgd_pd_init(m, prof, s, NoiseModel::make(1.5, 1.0), params(0.1, 1, 18, 18), Vector::Zero(4), rngs),
               InvalidArgument);
}

TEST(PullDiag, HomogeneousNoiselessInitTracksGradient) {
  const auto m = exp8();
  const auto prof = spectral_profile(m);
  const auto s = homogeneous(8, 5, 4);
  Rng rng(4);
  Vector x0(5);
  for (int k = 0; k < 5; ++k) x0(k) = rng.normal();
  auto rngs = agent_streams(1, 8);
  const auto st = dnsgd_pd_init(m, prof, s, NoiseModel::make(1.5, 0.0), params(0.1, 1, 19, 200), x0, rngs);
  const Vector g = s.global_grad(x0);
  // The directed tracker estimates the sum of local gradients.
  for (int i = 0; i < 8; ++i) EXPECT_LT((st.v.row(i).transpose() - 8.0 * g).norm(), 1e-4 * g.norm());
}

TEST(PullDiag, GoldenInitialTracker) {
  const auto m = exp8();
  const auto prof = spectral_profile(m);
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 8, 32, 50, 1.0, 3);
  auto rngs = agent_streams(42, 8);
  const auto st = dnsgd_pd_init(m, prof, s, NoiseModel::make(1.5, 1.0), params(0.01, 20, 19, 19), Vector::Zero(32), rngs);
  EXPECT_LE(pd_tracking_residual(st, prof.pi), 1e-10);
  // Frozen after the first build that passed the tracking identity check.
  const double expected[4] = {-3.2530419001635433, 4.8642104230808298, -0.67615553512087001, 58.66046395089122};
  const double got[4] = {st.v(0, 0), st.v(3, 7), st.v(7, 31), st.v.norm()};
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(got[k], expected[k], 1e-12 * std::max(1.0, std::abs(expected[k]))) << k;
}

TEST(PullDiag, ZeroStepKeepsConsensus) {
  const auto m = exp8();
  const auto prof = spectral_profile(m);
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 8, 6, 12, 1.0, 5);
  Rng rng(5);
  Vector x0(6);
  for (int k = 0; k < 6; ++k) x0(k) = rng.normal();
  auto rngs = agent_streams(2, 8);
  const auto noise = NoiseModel::make(1.5, 0.0);
  const auto p = params(0.0, 1, 19, 19);
  auto st = dnsgd_pd_init(m, prof, s, noise, p, x0, rngs);
  for (int t = 0; t < 5; ++t) {
    dnsgd_pd_step(st, m, s, noise, p, rngs);
    EXPECT_LT((st.x - consensus_matrix(8, x0)).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LE(pd_tracking_residual(st, prof.pi), 1e-12);
  }
}

TEST(PullDiag, SingleAgentIsNormalizedSgd) {
  const auto m = single();
  const auto prof = spectral_profile(m);
  const auto s = generate_suite(ObjectiveFamily::robust_regression, 1, 5, 20, 1.0, 6);
  const auto noise = NoiseModel::make(1.5, 0.0);
  const auto p = params(0.05, 1, 3, 3);
  auto rngs = agent_streams(1, 1);
  Vector x = Vector::Constant(5, 0.3);
  auto st = dnsgd_pd_init(m, prof, s, noise, p, x, rngs);
  for (int t = 0; t < 20; ++t) {
    const Vector g = s.local_grad(0, x);
    x -= 0.05 * g / g.norm();
    dnsgd_pd_step(st, m, s, noise, p, rngs);
    EXPECT_LT((st.x.row(0).transpose() - x).norm(), 1e-12);
  }
}

TEST(PullDiag, ConsensusRecursionHoldsEachStep) {
  const auto m = exp8();
  const auto prof = spectral_profile(m);
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 8, 10, 20, 1.0, 7);
  const auto noise = NoiseModel::make(1.5, 1.0);
  const auto p = params(0.05, 4, 19, 19);
  auto rngs = agent_streams(8, 8);
  auto st = dnsgd_pd_init(m, prof, s, noise, p, Vector::Zero(10), rngs);
  const double rho = rho_of(m, 19, prof.pi);
  for (int t = 0; t < 2; ++t) {
    const double before = consensus_error(st.x, prof.pi);
    dnsgd_pd_step(st, m, s, noise, p, rngs);
    EXPECT_LE(consensus_error(st.x, prof.pi), rho * (before + 2 * std::sqrt(8.0) * 0.05) + 1e-9);
  }
}

TEST(PullDiag, TrackingIdentityAndCounters) {
  const auto m = exp8();
  const auto prof = spectral_profile(m);
  const auto s = generate_suite(ObjectiveFamily::robust_regression, 8, 12, 20, 1.0, 8);
  const auto noise = NoiseModel::make(1.5, 1.0);
  const auto p = params(0.02, 3, 19, 25);
  auto rngs = agent_streams(9, 8);
  auto st = dnsgd_pd_init(m, prof, s, noise, p, Vector::Zero(12), rngs);
  for (int t = 1; t <= 300; ++t) {
    dnsgd_pd_step(st, m, s, noise, p, rngs);
    ASSERT_LE(pd_tracking_residual(st, prof.pi), 1e-8) << t;
    EXPECT_EQ(st.counters.samples, 8 * 3 * (t + 1));
    EXPECT_EQ(st.counters.comms, 25 + 19 * t);
  }
}

TEST(PullDiag, DivergenceGuardNamesMatrix) {
  const auto m = exp8();
  const auto prof = spectral_profile(m);
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 8, 4, 10, 1.0, 9);
  const auto noise = NoiseModel::make(1.5, 0.0);
  auto rngs = agent_streams(1, 8);
  auto st = dnsgd_pd_init(m, prof, s, noise, params(0.1, 1, 19, 19), Vector::Zero(4), rngs);
  st.v(2, 1) = std::numeric_limits<double>::infinity();
  try {
    dnsgd_pd_step(st, m, s, noise, params(0.1, 1, 19, 19), rngs);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 1);
    EXPECT_FALSE(e.matrix().empty());
  }
}

TEST(AccGossip, FixedPointsAndZeroRounds) {
  const auto m = lazy_ring(16);
  const auto prof = spectral_profile(m);
  Vector c(3);
  c << 1, -2, 0.5;
  const Matrix z = Vector::Ones(16) * c.transpose();
  for (int K : {1, 5, 30}) EXPECT_LT((acc_gossip(z, m, prof.beta, K) - z).cwiseAbs().maxCoeff(), 1e-13);
  const Matrix r = Matrix::Random(16, 3);
  EXPECT_EQ(acc_gossip(r, m, prof.beta, 0), r);
}

TEST(AccGossip, ContractionAndMeanPreservation) {
  const auto m = lazy_ring(16);
  const auto prof = spectral_profile(m);
  const GossipAccel acc(prof.beta);
  Rng rng(10);
  Matrix z(16, 4);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 4; ++j) z(i, j) = rng.normal();
  const Vector mean = z.colwise().mean().transpose();
  const Matrix out = acc_gossip(z, m, prof.beta, 10);
  const double before = (z.rowwise() - mean.transpose()).norm();
  const double after = (out.rowwise() - mean.transpose()).norm();
  EXPECT_LE(after, acc.contraction_bound(10) * before);
  EXPECT_LT((out.colwise().mean().transpose() - mean).norm(), 1e-10);
}

TEST(AccGossip, Constants) {
  const GossipAccel acc(0.5);
  EXPECT_NEAR(GossipAccel::c1, std::sqrt(14.0), 1e-15);
  EXPECT_NEAR(GossipAccel::c2, 1 - 1 / std::sqrt(2.0), 1e-15);
  const double r = std::sqrt(0.75);
  EXPECT_NEAR(acc.eta_z, (1 - r) / (1 + r), 1e-15);
  EXPECT_EQ(GossipAccel(0.0).eta_z, 0.0);
  EXPECT_THROW(acc_gossip(Matrix::Zero(8, 2), exp8(), 0.5, 3), InvalidArgument);
}

TEST(Undirected, SingleAgentIsNormalizedSgd) {
  const auto m = assign_weights(build_topology(TopologyKind::undirected_ring, 1), WeightScheme::lazy_metropolis());
  const auto prof = spectral_profile(m);
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 1, 5, 20, 1.0, 11);
  const auto noise = NoiseModel::make(1.5, 0.0);
  const auto p = params(0.05, 1, 3, 3);
  auto rngs = agent_streams(1, 1);
  Vector x = Vector::Constant(5, 1.0);
  auto st = dnsgd_un_init(m, prof, s, noise, p, x, rngs);
  for (int t = 0; t < 20; ++t) {
    const Vector g = s.local_grad(0, x);
    x -= 0.05 * g / g.norm();
    dnsgd_un_step(st, m, prof, s, noise, p, rngs);
    EXPECT_LT((st.x.row(0).transpose() - x).norm(), 1e-12);
  }
}

TEST(Undirected, HomogeneousNoiselessFollowsNormalizedGd) {
  const auto m = lazy_ring(8);
  const auto prof = spectral_profile(m);
  const auto s = homogeneous(8, 4, 12);
  const auto noise = NoiseModel::make(1.5, 0.0);
  const auto p = params(0.05, 1, 60, 60);
  auto rngs = agent_streams(1, 8);
  Vector x = Vector::Constant(4, 1.0);
  auto st = dnsgd_un_init(m, prof, s, noise, p, x, rngs);
  for (int t = 0; t < 30; ++t) {
    const Vector g = s.global_grad(x);
    x -= 0.05 * g / g.norm();
    dnsgd_un_step(st, m, prof, s, noise, p, rngs);
    EXPECT_LT((st.x.colwise().mean().transpose() - x).norm(), 1e-10);
  }
}

TEST(Undirected, MeanTrackingAndConsensusRecursion) {
  const auto m = lazy_ring(16);
  const auto prof = spectral_profile(m);
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 16, 8, 20, 1.0, 13);
  const auto noise = NoiseModel::make(1.5, 1.0);
  const auto p = params(0.02, 2, 20, 20);
  auto rngs = agent_streams(3, 16);
  auto st = dnsgd_un_init(m, prof, s, noise, p, Vector::Zero(8), rngs);
  const Vector uniform = Vector::Constant(16, 1.0 / 16);
  // Measured contraction of the accelerated operator, tighter than the bound.
  const double rho = (acc_gossip(Matrix::Identity(16, 16), m, prof.beta, 20) - Matrix::Constant(16, 16, 1.0 / 16)).norm();
  EXPECT_LE(rho, GossipAccel(prof.beta).contraction_bound(20) * std::sqrt(16.0));
  for (int t = 1; t <= 200; ++t) {
    const double before = consensus_error(st.x, uniform);
    dnsgd_un_step(st, m, prof, s, noise, p, rngs);
    ASSERT_LE(mean_tracking_residual(st), 1e-8);
    EXPECT_LE(consensus_error(st.x, uniform), rho * (before + 4.0 * 0.02) + 1e-9);
    EXPECT_EQ(st.counters.comms, 20 + 20 * t);
  }
}

TEST(Dsgt, SingleAgentIsGradientDescent) {
  const auto m = single();
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 1, 5, 20, 1.0, 14);
  const auto noise = NoiseModel::make(1.5, 0.0);
  const auto p = params(0.1, 1, 1, 1);
  auto rngs = agent_streams(1, 1);
  Vector x = Vector::Constant(5, 1.0);
  auto st = dsgt_init(m, s, noise, p, x, rngs);
  for (int t = 0; t < 20; ++t) {
    x -= 0.1 * s.local_grad(0, x);
    dsgt_step(st, m, s, noise, p, rngs);
    EXPECT_LT((st.x.row(0).transpose() - x).norm(), 1e-12);
  }
}

TEST(Dsgt, MeanFollowsGradientDescentFromConsensus) {
  const auto m = exp8();
  const auto s = homogeneous(8, 4, 15);
  const auto noise = NoiseModel::make(1.5, 0.0);
  const auto p = params(0.1, 1, 1, 1);
  auto rngs = agent_streams(1, 8);
  Vector x = Vector::Constant(4, 1.0);
  auto st = dsgt_init(m, s, noise, p, x, rngs);
  for (int t = 0; t < 20; ++t) {
    x -= 0.1 * s.global_grad(x);
    dsgt_step(st, m, s, noise, p, rngs);
    EXPECT_LT((st.x.colwise().mean().transpose() - x).norm(), 1e-12);
    EXPECT_LE(mean_tracking_residual(st), 1e-12);
  }
}

TEST(Dsgt, RequiresColumnStochastic) {
  const auto m = assign_weights(build_topology(TopologyKind::directed_ring, 8), WeightScheme::uniform_out());
  // Directed ring with uniform_out is circulant, so it qualifies.
  EXPECT_TRUE(m.column_stochastic());
  const auto t = build_random_digraph(6, 0.4, 3);
  const auto skew = assign_weights(t, WeightScheme::uniform_out());
  const auto s = generate_suite(ObjectiveFamily::het_quadratic, 6, 3, 5, 1.0, 1);
  auto rngs = agent_streams(1, 6);
  if (!skew.column_stochastic())
    EXPECT_THROW(dsgt_init(skew, s, NoiseModel::make(1.5, 1.0), params(0.1, 1, 1, 1), Vector::Zero(3), rngs),
                 InvalidArgument);
}

// Closed forms evaluated by hand for n = 8, L = Delta = sigma = 1, eps = 0.1, p = 2.
TEST(TheoremParams, DirectedClosedForms) {
  SpectralProfile prof;
  prof.beta = 0.5;
  prof.kappa = 1.0;
  prof.n = 8;
  prof.theta = 16.0;
  TheoremInputs in;
  in.L = 1;
  in.Delta = 1;
  in.eps = 0.1;
  in.sigma = 1;
  in.p = 2;
  in.n = 8;
  in.grad0_norms.assign(8, 1.0);
  const auto r = theorem_params(NetworkMode::directed, in, prof);
  EXPECT_EQ(r.T, 367200);
  EXPECT_NEAR(r.eta, 1.0893246187363834e-04, 1e-18);
  EXPECT_EQ(r.b, 134152200);
  EXPECT_EQ(r.K, 19);
  EXPECT_EQ(r.K_hat, 1);
  in.Delta = 1e-4;
  EXPECT_EQ(theorem_params(NetworkMode::directed, in, prof).K_hat, 9);
}

TEST(TheoremParams, UndirectedClosedForms) {
  SpectralProfile prof;
  prof.beta = 0.5;
  prof.kappa = 1.0;
  prof.n = 8;
  TheoremInputs in;
  in.L = 1;
  in.Delta = 1;
  in.eps = 0.1;
  in.sigma = 1;
  in.p = 2;
  in.n = 8;
  in.grad0_norms.assign(8, 1.0);
  const auto r = theorem_params(NetworkMode::undirected, in, prof);
  EXPECT_EQ(r.T, 92400);
  EXPECT_NEAR(r.eta, 3.7037037037037035e-04, 1e-18);
  EXPECT_EQ(r.b, 1036800);
  EXPECT_EQ(r.K, 11);
  EXPECT_EQ(r.K_hat, 1);
  in.Delta = 1e-4;
  EXPECT_EQ(theorem_params(NetworkMode::undirected, in, prof).K_hat, 7);
}

TEST(TheoremParams, LargeBatchIsExactInteger) {
  SpectralProfile prof;
  prof.beta = 0.5;
  prof.kappa = 1.0;
  prof.n = 8;
  prof.theta = 16.0;
  TheoremInputs in;
  in.p = 1.5;
  in.n = 8;
  in.grad0_norms.assign(8, 1.0);
  // 32760^3 / 8, exactly representable.
  EXPECT_EQ(theorem_params(NetworkMode::directed, in, prof).b, 4394826072000);
  EXPECT_EQ(theorem_params(NetworkMode::undirected, in, prof).b, 2985984000);
}

TEST(TheoremParams, EdgeCases) {
  SpectralProfile one;
  one.beta = 0.0;
  one.kappa = 1.0;
  one.n = 1;
  one.theta = 2.0;
  TheoremInputs in;
  in.n = 1;
  in.grad0_norms = {2.0};
  in.sigma = 0.0;
  const auto r = theorem_params(NetworkMode::directed, in, one);
  EXPECT_EQ(r.b, 1);
  EXPECT_EQ(r.K, 3);

  in.sigma = 1.0;
  in.eps = 1e-7;
  EXPECT_THROW(theorem_params(NetworkMode::directed, in, one), InvalidArgument);
  in.eps = 0.1;
  in.budget_cap = 1000;
  EXPECT_THROW(theorem_params(NetworkMode::directed, in, one), InvalidArgument);
  in.budget_cap = 1e15;
  in.p = 2.5;
  EXPECT_THROW(theorem_params(NetworkMode::directed, in, one), InvalidArgument);
}
