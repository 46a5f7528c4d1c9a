// Copyright (c) 2026 The decopt authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "decopt/algos.hpp"
#include "decopt/errors.hpp"
#include "decopt/net_topology.hpp"
#include "decopt/oracle.hpp"

namespace decopt {

// w = pi^T X.
inline Vector weighted_average(const Vector& pi, const Matrix& x) { return x.transpose() * pi; }

// ||X - 1 pi^T X||_F.
inline double consensus_error(const Matrix& x, const Vector& pi) {
  const Vector w = weighted_average(pi, x);
  return (x.rowwise() - w.transpose()).norm();
}

// Directed networks track n grad f through pi^T V, undirected ones track
// grad f through the plain mean, so the two deviations differ by the factor n.
inline double deviation_norm(NetworkMode mode, const ObjectiveSuite& suite, const Vector& w, const Vector& pi,
                             const Matrix& v) {
  const double n = suite.n();
  const Vector grad = suite.global_grad(w);
  const Vector tracked = weighted_average(pi, v);
  if (mode == NetworkMode::directed) return (n * grad - tracked).norm() / n;
  return (grad - tracked).norm();
}

// directed:   f + 32 eta L / sqrt(n) C_x + 4 eta / n C_v
// undirected: f + 32 eta L / sqrt(n) C_x + 4 eta / sqrt(n) C_v
inline double lyapunov(NetworkMode mode, double f_value, double cx, double cv, double eta, double L, int n) {
  const double rn = std::sqrt(static_cast<double>(n));
  const double cv_weight = mode == NetworkMode::directed ? 4.0 * eta / n : 4.0 * eta / rn;
  return f_value + 32.0 * eta * L / rn * cx + cv_weight * cv;
}

struct MetricsRecord {
  std::int64_t t = 0;
  double f_value = 0.0;
  double grad_norm_w = 0.0;
  double consensus_x = 0.0;
  double consensus_v = 0.0;
  double deviation = 0.0;
  double lyapunov = 0.0;
  std::int64_t samples = 0;
  std::int64_t comms = 0;
  std::vector<std::string> violations;

  bool operator==(const MetricsRecord&) const = default;
};

using MetricsTable = std::vector<MetricsRecord>;

inline NetworkMode mode_of(Algorithm a) {
  return a == Algorithm::dnsgd_pd ? NetworkMode::directed : NetworkMode::undirected;
}

// Everything the monitors need that does not change during a run.
struct MonitorContext {
  Algorithm algorithm = Algorithm::dnsgd_pd;
  NetworkMode mode = NetworkMode::directed;
  Vector pi;
  double rho = 0.0;  // measured contraction of one iteration's gossip operator
  double eta = 0.0;
  double L = 0.0;
  int n = 1;
  std::int64_t b = 1;
  std::int64_t K = 1;
  const ObjectiveSuite* suite = nullptr;
};

// The contraction used by the consensus monitor is ||P - 1 pi^T||_F where P is
// the per-iteration gossip operator: A^K, or the accelerated polynomial in A.
inline MonitorContext make_monitor_context(Algorithm algo, const MixingMatrix& mix, const SpectralProfile& prof,
                                           const RunParams& params, const ObjectiveSuite& suite) {
  MonitorContext c;
  c.algorithm = algo;
  c.mode = mode_of(algo);
  c.n = mix.n();
  c.pi = c.mode == NetworkMode::directed ? prof.pi : Vector::Constant(c.n, 1.0 / c.n);
  c.eta = params.eta;
  c.L = suite.smoothness_constant();
  c.b = params.b;
  c.K = params.K;
  c.suite = &suite;
  const Matrix proj = Vector::Ones(c.n) * c.pi.transpose();
  if (algo == Algorithm::dnsgd) {
    c.rho = (acc_gossip(Matrix::Identity(c.n, c.n), mix, prof.beta, params.K) - proj).norm();
  } else {
    c.rho = (matrix_power(mix.a(), params.K) - proj).norm();
  }
  return c;
}

// Copy of the quantities a step consumes, taken before the step runs.
struct StepSnapshot {
  Matrix x;
  Matrix v;
  Matrix g;
  Vector d_inv;  // empty outside the directed algorithm
  Counters counters;
};

inline StepSnapshot snapshot(const IterState& s) { return {s.x, s.v, s.g, Vector(), s.counters}; }
inline StepSnapshot snapshot(const PdState& s) { return {s.x, s.v, s.g, s.d_cur.cwiseInverse(), s.counters}; }

struct MonitorTolerance {
  double rel = 1e-9;
  double tracking = 1e-8;
  double mean = 1e-10;
};

namespace detail {

inline bool exceeds(double lhs, double rhs, double rel) { return lhs > rhs + rel * std::max(1.0, std::abs(rhs)); }

}  // namespace detail

// Tracking identity on a single state. Directed: pi^T V = pi^T D^{-1} G;
// otherwise mean V = mean G.
inline double tracking_residual(const MonitorContext& c, const Matrix& v, const Matrix& g, const Vector& d_inv) {
  Vector rhs;
  if (c.mode == NetworkMode::directed) {
    rhs = weighted_average(c.pi.cwiseProduct(d_inv), g);
  } else {
    rhs = weighted_average(c.pi, g);
  }
  return (weighted_average(c.pi, v) - rhs).norm() / (1.0 + g.norm());
}

// Evaluates every deterministic per-step inequality for the step prev -> next
// and returns the names of those that fail.
//   tracking_identity         tracked average equals the (scaled) gradient average
//   consensus_recursion       C_x(t+1) <= rho (C_x(t) + step bound)
//   smoothness_descent        descent inequality for the weighted average
//   direction_norm_bound      ||pi^T U|| <= 1 for normalized directions
//   gossip_mean_preservation  gossip leaves pi^T of its input unchanged
//   counter_monotonicity      samples grow by n b and comms by K
inline std::vector<std::string> step_monitors(const MonitorContext& c, const StepSnapshot& prev,
                                              const IterState& next, const Vector& next_d_inv,
                                              const MonitorTolerance& tol = {}) {
  std::vector<std::string> out;
  const ObjectiveSuite& suite = *c.suite;
  const double rn = std::sqrt(static_cast<double>(c.n));

  if (tracking_residual(c, next.v, next.g, next_d_inv) > tol.tracking) out.emplace_back("tracking_identity");

  // Consensus recursion. Normalized directions satisfy ||U|| <= sqrt(n), so the
  // step term is 2 sqrt(n) eta (directed) or sqrt(n) eta (undirected). The
  // unnormalized baseline uses ||(I - 1 pi^T) V_t|| directly.
  {
    const double cx_prev = consensus_error(prev.x, c.pi);
    const double cx_next = consensus_error(next.x, c.pi);
    double step_term = 0.0;
    switch (c.algorithm) {
      case Algorithm::dnsgd_pd: step_term = 2.0 * rn * c.eta; break;
      case Algorithm::dnsgd: step_term = rn * c.eta; break;
      case Algorithm::dsgt: step_term = c.eta * consensus_error(prev.v, c.pi); break;
    }
    if (detail::exceeds(cx_next, c.rho * (cx_prev + step_term), tol.rel)) out.emplace_back("consensus_recursion");
  }

  const Vector w_prev = weighted_average(c.pi, prev.x);
  const Vector w_next = weighted_average(c.pi, next.x);
  const Vector pu = weighted_average(c.pi, next.u);
  {
    const double f_prev = suite.global_value(w_prev);
    const double f_next = suite.global_value(w_next);
    const double rhs = f_prev - c.eta * suite.global_grad(w_prev).dot(pu) + 0.5 * c.eta * c.eta * c.L * pu.squaredNorm();
    if (detail::exceeds(f_next, rhs, tol.rel)) out.emplace_back("smoothness_descent");
  }

  if (c.algorithm != Algorithm::dsgt && pu.norm() > 1.0 + 1e-12) out.emplace_back("direction_norm_bound");

  {
    const Vector expect = w_prev - c.eta * pu;
    const double scale = 1.0 + w_prev.norm() + c.eta * pu.norm();
    if ((w_next - expect).norm() > tol.mean * scale) out.emplace_back("gossip_mean_preservation");
  }

  const std::int64_t ds = next.counters.samples - prev.counters.samples;
  const std::int64_t dc = next.counters.comms - prev.counters.comms;
  if (ds != static_cast<std::int64_t>(c.n) * c.b || dc != c.K) out.emplace_back("counter_monotonicity");
  return out;
}

inline MetricsRecord make_record(const MonitorContext& c, const IterState& s) {
  const ObjectiveSuite& suite = *c.suite;
  MetricsRecord r;
  r.t = s.t;
  const Vector w = weighted_average(c.pi, s.x);
  r.f_value = suite.global_value(w);
  r.grad_norm_w = suite.global_grad(w).norm();
  r.consensus_x = consensus_error(s.x, c.pi);
  r.consensus_v = consensus_error(s.v, c.pi);
  r.deviation = deviation_norm(c.mode, suite, w, c.pi, s.v);
  r.lyapunov = lyapunov(c.mode, r.f_value, r.consensus_x, r.consensus_v, c.eta, c.L, c.n);
  r.samples = s.counters.samples;
  r.comms = s.counters.comms;
  return r;
}

// ---------------------------------------------------------------------------
// Deviation scaling with the total batch nb
// ---------------------------------------------------------------------------

inline double median(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("median of an empty sample");
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

// Ordinary least-squares slope of y against x.
inline double ols_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw InvalidArgument("ols_slope needs two or more paired points");
  const double k = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= k;
  my /= k;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

struct DeviationScalingPoint {
  std::int64_t nb = 0;
  double median_deviation = 0.0;
};

struct DeviationScaling {
  std::vector<DeviationScalingPoint> points;
  double slope = 0.0;  // d log(median deviation) / d log(nb)
};

// Median over seeds of the initial directed-algorithm deviation at x0 for each
// batch size; the state is fixed so only the sampled noise varies.
inline DeviationScaling deviation_scaling_study(const MixingMatrix& mix, const SpectralProfile& prof,
                                                const ObjectiveSuite& suite, const NoiseModel& noise,
                                                const Vector& x0, std::int64_t K,
                                                const std::vector<std::int64_t>& batches, int seeds,
                                                std::uint64_t base_seed) {
  DeviationScaling out;
  std::vector<double> lx, ly;
  for (std::int64_t b : batches) {
    RunParams params;
    params.b = b;
    params.K = K;
    params.K_hat = K;
    std::vector<double> devs;
    devs.reserve(static_cast<std::size_t>(seeds));
    for (int s = 0; s < seeds; ++s) {
      auto rngs = agent_streams(derive_seed(base_seed, derive_seed(static_cast<std::uint64_t>(b), s)), mix.n());
      const PdState st = dnsgd_pd_init(mix, prof, suite, noise, params, x0, rngs);
      devs.push_back(deviation_norm(NetworkMode::directed, suite, weighted_average(prof.pi, st.x), prof.pi, st.v));
    }
    const double med = median(devs);
    const std::int64_t nb = b * mix.n();
    out.points.push_back({nb, med});
    lx.push_back(std::log(static_cast<double>(nb)));
    ly.push_back(std::log(med));
  }
  out.slope = ols_slope(lx, ly);
  return out;
}

}  // namespace decopt
