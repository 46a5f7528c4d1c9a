// Copyright (c) 2026 The decopt authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "decopt/errors.hpp"
#include "decopt/net_topology.hpp"
#include "decopt/oracle.hpp"
#include "decopt/rng.hpp"

namespace decopt {

enum class Algorithm { dnsgd_pd, dnsgd, dsgt };

inline std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::dnsgd_pd: return "dnsgd_pd";
    case Algorithm::dnsgd: return "dnsgd";
    case Algorithm::dsgt: return "dsgt";
  }
  return "dnsgd_pd";
}

inline std::optional<Algorithm> parse_algorithm(std::string_view s) {
  for (auto a : {Algorithm::dnsgd_pd, Algorithm::dnsgd, Algorithm::dsgt})
    if (to_string(a) == s) return a;
  return std::nullopt;
}

struct RunParams {
  double eta = 0.01;
  std::int64_t b = 1;
  std::int64_t K = 1;      // gossip rounds per iteration
  std::int64_t K_hat = 1;  // gossip rounds at initialisation
  std::int64_t T = 1;

  void validate() const {
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw InvalidArgument("eta must be finite and nonnegative");
    if (b < 1 || K < 1 || K_hat < 1 || T < 1) throw InvalidArgument("b, K, K_hat and T must all be >= 1");
  }
};

struct Counters {
  std::int64_t samples = 0;
  std::int64_t comms = 0;
};

// Stacked agent state. u holds the direction used by the most recent step
// (normalized tracker rows, or the raw tracker for gradient tracking).
struct IterState {
  Matrix x;
  Matrix v;
  Matrix g;
  Matrix u;
  std::int64_t t = 0;
  Counters counters;
  std::int64_t zero_rows = 0;  // rows that normalized to zero so far
};

// Directed-network state. d_cur is the diagonal of A^{(t+1)K}.
struct PdState : IterState {
  Vector d_cur;
  PowerDiagonal power;

  PdState(const MixingMatrix& mix, const SpectralProfile& prof) : power(mix, prof) {}
};

using UnState = IterState;

inline constexpr double kZeroRowNorm = 1e-300;

// Row i becomes v_i / ||v_i||, or the zero row when ||v_i|| < 1e-300.
inline Matrix normalize_rows(const Matrix& v, std::int64_t* zero_rows = nullptr) {
  Matrix u(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double nrm = v.row(i).norm();
    if (nrm < kZeroRowNorm) {
      u.row(i).setZero();
      if (zero_rows) ++*zero_rows;
    } else {
      u.row(i) = v.row(i) / nrm;
    }
  }
  return u;
}

inline void ensure_finite(const Matrix& m, std::int64_t step, const char* name) {
  if (!m.allFinite()) throw DivergenceError(step, name);
}

// One batch gradient per agent at the rows of x. Agent i draws from rngs[i].
inline Matrix batch_gradients(const ObjectiveSuite& suite, const Matrix& x, const NoiseModel& noise,
                              std::int64_t b, std::vector<Rng>& rngs, Counters& counters) {
  const int n = suite.n();
  if (x.rows() != n || x.cols() != suite.d()) throw InvalidArgument("iterate matrix has wrong shape");
  if (static_cast<int>(rngs.size()) != n) throw InvalidArgument("need one random stream per agent");
  Matrix g(n, suite.d());
  for (int i = 0; i < n; ++i) {
    const Vector xi = x.row(i).transpose();
    g.row(i) = stochastic_batch_grad(suite, i, xi, noise, b, rngs[static_cast<std::size_t>(i)], &counters.samples)
                   .transpose();
  }
  return g;
}

inline Matrix consensus_matrix(int n, const Vector& x0) { return Vector::Ones(n) * x0.transpose(); }

namespace detail {

inline void check_shapes(const MixingMatrix& mix, const ObjectiveSuite& suite, const Vector& x0) {
  if (mix.n() != suite.n()) throw InvalidArgument("mixing matrix and objective disagree on n");
  if (x0.size() != suite.d()) throw InvalidArgument("x0 has wrong dimension");
  if (!x0.allFinite()) throw InvalidArgument("x0 must be finite");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pull-diag normalized SGD for row-stochastic networks
// ---------------------------------------------------------------------------

inline PdState dnsgd_pd_init(const MixingMatrix& mix, const SpectralProfile& prof, const ObjectiveSuite& suite,
                             const NoiseModel& noise, const RunParams& params, const Vector& x0,
                             std::vector<Rng>& rngs) {
  params.validate();
  detail::check_shapes(mix, suite, x0);
  const int kmin = min_mixing_steps(prof);
  if (params.K < kmin)
    throw InvalidArgument("K = " + std::to_string(params.K) + " is below the mixing threshold " + std::to_string(kmin));
  PdState s(mix, prof);
  const int n = mix.n();
  s.x = consensus_matrix(n, x0);
  s.g = batch_gradients(suite, s.x, noise, params.b, rngs, s.counters);
  ensure_finite(s.g, 0, "G");
  s.d_cur = s.power.diag(params.K);
  s.v = matrix_power_apply(mix, params.K_hat, s.d_cur.cwiseInverse().asDiagonal() * s.g);
  s.counters.comms += params.K_hat;
  s.u = Matrix::Zero(n, suite.d());
  ensure_finite(s.v, 0, "V");
  return s;
}

inline void dnsgd_pd_step(PdState& s, const MixingMatrix& mix, const ObjectiveSuite& suite, const NoiseModel& noise,
                          const RunParams& params, std::vector<Rng>& rngs) {
  const std::int64_t next = s.t + 1;
  s.u = normalize_rows(s.v, &s.zero_rows);
  s.x = matrix_power_apply(mix, params.K, s.x - params.eta * s.u);
  ensure_finite(s.x, next, "X");
  Matrix g_new = batch_gradients(suite, s.x, noise, params.b, rngs, s.counters);
  ensure_finite(g_new, next, "G");
  Vector d_next = s.power.diag((next + 1) * params.K);
  s.v = matrix_power_apply(
      mix, params.K, s.v + d_next.cwiseInverse().asDiagonal() * g_new - s.d_cur.cwiseInverse().asDiagonal() * s.g);
  ensure_finite(s.v, next, "V");
  s.g = std::move(g_new);
  s.d_cur = std::move(d_next);
  s.counters.comms += params.K;
  s.t = next;
}

// ---------------------------------------------------------------------------
// Chebyshev-accelerated gossip
// ---------------------------------------------------------------------------

struct GossipAccel {
  double beta = 0.0;
  double eta_z = 0.0;
  static constexpr double c1 = 3.7416573867739413;  // sqrt(14)
  static constexpr double c2 = 0.29289321881345248;  // 1 - 1/sqrt(2)

  explicit GossipAccel(double beta_) : beta(beta_) {
    if (!(beta >= 0.0 && beta < 1.0)) throw InvalidArgument("gossip acceleration needs beta in [0, 1)");
    const double r = std::sqrt(1.0 - beta * beta);
    eta_z = (1.0 - r) / (1.0 + r);
  }

  // Guaranteed contraction factor after K rounds: c1 (1 - c2 sqrt(1 - beta))^K.
  double contraction_bound(std::int64_t K) const {
    return c1 * std::pow(1.0 - c2 * std::sqrt(1.0 - beta), static_cast<double>(K));
  }
};

inline Matrix acc_gossip(const Matrix& z0, const MixingMatrix& mix, double beta, std::int64_t K) {
  if (mix.kind() != StochasticKind::doubly_stochastic)
    throw InvalidArgument("accelerated gossip requires a doubly-stochastic mixing matrix");
  if (K < 0) throw InvalidArgument("accelerated gossip: negative round count");
  if (z0.rows() != mix.n()) throw InvalidArgument("accelerated gossip: dimension mismatch");
  const GossipAccel acc(beta);
  const Matrix& a = mix.a();
  Matrix prev = z0, cur = z0;
  for (std::int64_t k = 0; k < K; ++k) {
    Matrix nxt = (1.0 + acc.eta_z) * (a * cur) - acc.eta_z * prev;
    prev = std::move(cur);
    cur = std::move(nxt);
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Normalized SGD with accelerated gossip for undirected networks
// ---------------------------------------------------------------------------

inline UnState dnsgd_un_init(const MixingMatrix& mix, const SpectralProfile& prof, const ObjectiveSuite& suite,
                             const NoiseModel& noise, const RunParams& params, const Vector& x0,
                             std::vector<Rng>& rngs) {
  params.validate();
  detail::check_shapes(mix, suite, x0);
  UnState s;
  s.x = consensus_matrix(mix.n(), x0);
  s.g = batch_gradients(suite, s.x, noise, params.b, rngs, s.counters);
  ensure_finite(s.g, 0, "G");
  s.v = acc_gossip(s.g, mix, prof.beta, params.K_hat);
  s.counters.comms += params.K_hat;
  s.u = Matrix::Zero(mix.n(), suite.d());
  ensure_finite(s.v, 0, "V");
  return s;
}

inline void dnsgd_un_step(UnState& s, const MixingMatrix& mix, const SpectralProfile& prof,
                          const ObjectiveSuite& suite, const NoiseModel& noise, const RunParams& params,
                          std::vector<Rng>& rngs) {
  const std::int64_t next = s.t + 1;
  s.u = normalize_rows(s.v, &s.zero_rows);
  s.x = acc_gossip(s.x - params.eta * s.u, mix, prof.beta, params.K);
  ensure_finite(s.x, next, "X");
  Matrix g_new = batch_gradients(suite, s.x, noise, params.b, rngs, s.counters);
  ensure_finite(g_new, next, "G");
  s.v = acc_gossip(s.v + g_new - s.g, mix, prof.beta, params.K);
  ensure_finite(s.v, next, "V");
  s.g = std::move(g_new);
  s.counters.comms += params.K;
  s.t = next;
}

// ---------------------------------------------------------------------------
// Gradient-tracking SGD baseline. Each iteration applies A^K, with K = 1
// giving the textbook single-gossip method.
// ---------------------------------------------------------------------------

inline UnState dsgt_init(const MixingMatrix& mix, const ObjectiveSuite& suite, const NoiseModel& noise,
                         const RunParams& params, const Vector& x0, std::vector<Rng>& rngs) {
  params.validate();
  detail::check_shapes(mix, suite, x0);
  if (!mix.column_stochastic()) throw InvalidArgument("gradient tracking requires column sums equal to 1");
  UnState s;
  s.x = consensus_matrix(mix.n(), x0);
  s.g = batch_gradients(suite, s.x, noise, params.b, rngs, s.counters);
  ensure_finite(s.g, 0, "G");
  s.v = s.g;
  s.u = Matrix::Zero(mix.n(), suite.d());
  return s;
}

inline void dsgt_step(UnState& s, const MixingMatrix& mix, const ObjectiveSuite& suite, const NoiseModel& noise,
                      const RunParams& params, std::vector<Rng>& rngs) {
  const std::int64_t next = s.t + 1;
  s.u = s.v;
  s.x = matrix_power_apply(mix, params.K, s.x - params.eta * s.v);
  ensure_finite(s.x, next, "X");
  Matrix g_new = batch_gradients(suite, s.x, noise, params.b, rngs, s.counters);
  ensure_finite(g_new, next, "G");
  s.v = matrix_power_apply(mix, params.K, s.v) + g_new - s.g;
  ensure_finite(s.v, next, "V");
  s.g = std::move(g_new);
  s.counters.comms += params.K;
  s.t = next;
}

// ---------------------------------------------------------------------------
// Parameter schedules from the convergence theorems
// ---------------------------------------------------------------------------

enum class NetworkMode { directed, undirected };

inline std::string_view to_string(NetworkMode m) { return m == NetworkMode::directed ? "directed" : "undirected"; }

struct TheoremInputs {
  double L = 1.0;
  double Delta = 1.0;
  double eps = 0.1;
  double sigma = 1.0;
  double p = 2.0;
  int n = 1;
  std::vector<double> grad0_norms;  // ||grad f_i(x0)|| per agent
  double budget_cap = 9007199254740992.0;  // 2^53
};

namespace detail {

inline std::int64_t capped(double v, double cap, const char* what) {
  if (!std::isfinite(v) || v > cap)
    throw InvalidArgument(std::string("theorem schedule: ") + what + " exceeds the budget cap");
  return std::max<std::int64_t>(1, detail::ceil_int(v));
}

}  // namespace detail

// Smallest K >= 1 with sqrt(14) (1 - c2 sqrt(1 - beta))^K <= target.
inline std::int64_t accelerated_rounds_for(double beta, double target) {
  const GossipAccel acc(beta);
  const double q = 1.0 - GossipAccel::c2 * std::sqrt(1.0 - beta);
  std::int64_t k = std::max<std::int64_t>(1, detail::ceil_int(std::log(GossipAccel::c1 / target) / -std::log(q)));
  while (acc.contraction_bound(k) > target) ++k;
  while (k > 1 && acc.contraction_bound(k - 1) <= target) --k;
  return k;
}

inline RunParams theorem_params(NetworkMode mode, const TheoremInputs& in, const SpectralProfile& prof) {
  if (!(in.L > 0.0 && in.Delta > 0.0 && in.eps > 0.0 && in.sigma >= 0.0))
    throw InvalidArgument("theorem schedule: L, Delta, eps must be positive and sigma nonnegative");
  if (!(in.p > 1.0 && in.p <= 2.0)) throw InvalidArgument("theorem schedule: p must lie in (1, 2]");
  if (in.n < 1 || in.n != prof.n) throw InvalidArgument("theorem schedule: n must match the spectral profile");
  if (static_cast<int>(in.grad0_norms.size()) != in.n)
    throw InvalidArgument("theorem schedule: need one initial gradient norm per agent");

  const double n = in.n, beta = prof.beta, kappa = prof.kappa;
  const bool directed = mode == NetworkMode::directed;
  const double c_T = directed ? 3672.0 : 924.0;
  const double c_eta = directed ? 918.0 : 270.0;
  const double c_b = directed ? 3276.0 : 288.0;

  RunParams r;
  r.T = detail::capped(c_T * in.L * in.Delta / (in.eps * in.eps), in.budget_cap, "T");
  r.eta = in.eps / (c_eta * in.L);
  const double b_raw = std::pow(c_b * in.sigma / in.eps, in.p / (in.p - 1.0)) / n;
  r.b = detail::capped(b_raw, in.budget_cap, "b");

  double sq = 0.0;
  for (double g : in.grad0_norms) sq += g * g;
  const double noise_term = 2.0 * std::sqrt(2.0 * n) * in.sigma / std::pow(static_cast<double>(r.b), 1.0 - 1.0 / in.p);
  const double init_mass = std::sqrt(sq) + noise_term;

  if (directed) {
    const std::int64_t kmin = min_mixing_steps(prof);
    const double root = std::sqrt(n * kappa);
    const double k_log = std::log(root * (in.eps + 4.0 * n * r.eta * in.L) / in.eps) / (1.0 - beta);
    r.K = std::max<std::int64_t>(kmin, detail::ceil_int(k_log));
    const double kh = std::log1p(8.0 * kappa * r.eta * root * init_mass / in.Delta) / (1.0 - beta);
    r.K_hat = std::max<std::int64_t>(1, detail::ceil_int(kh));
  } else {
    const double target = std::min(0.5, std::pow(n, -(1.0 - 1.0 / in.p)));
    r.K = accelerated_rounds_for(beta, target);
    const double kh = std::log1p(8.0 * r.eta * init_mass / (std::sqrt(n) * in.Delta)) / (1.0 - beta);
    r.K_hat = std::max<std::int64_t>(1, detail::ceil_int(kh));
  }
  return r;
}

}  // namespace decopt
