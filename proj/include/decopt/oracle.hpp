// Copyright (c) 2026 The decopt authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "decopt/errors.hpp"
#include "decopt/net_topology.hpp"
#include "decopt/rng.hpp"

namespace decopt {

enum class ObjectiveFamily { het_quadratic, robust_regression };

inline std::string_view to_string(ObjectiveFamily f) {
  return f == ObjectiveFamily::het_quadratic ? "het_quadratic" : "robust_regression";
}

inline std::optional<ObjectiveFamily> parse_objective_family(std::string_view s) {
  if (s == "het_quadratic") return ObjectiveFamily::het_quadratic;
  if (s == "robust_regression") return ObjectiveFamily::robust_regression;
  return std::nullopt;
}

// Per-agent data. For het_quadratic, f_i(x) = 1/2 ||B_i x - c_i||^2 with
// rows = B_i and targets = c_i. For robust_regression,
// f_i(x) = (1/m) sum_j l(a_ij^T x - y_ij) with l(r) = r^2 / (1 + r^2),
// rows = [a_ij^T] and targets = y.
struct AgentData {
  Matrix rows;
  Vector targets;
};

namespace detail {

inline double top_eigenvalue_gram(const Matrix& b) {
  if (b.rows() == 0 || b.cols() == 0) return 0.0;
  const Matrix g = b.transpose() * b;
  if (g.norm() == 0.0) return 0.0;
  return top_eigenvalue_psd(g, 1e-13, 1'000'000, 0x1a57ULL);
}

}  // namespace detail

class ObjectiveSuite {
 public:
  ObjectiveSuite(ObjectiveFamily family, std::vector<AgentData> agents) : family_(family), agents_(std::move(agents)) {
    if (agents_.empty()) throw InvalidArgument("objective suite needs at least one agent");
    d_ = static_cast<int>(agents_[0].rows.cols());
    if (d_ < 1) throw InvalidArgument("objective dimension must be positive");
    for (const auto& a : agents_) {
      if (a.rows.cols() != d_ || a.rows.rows() != a.targets.size() || a.rows.rows() < 1)
        throw InvalidArgument("inconsistent agent data shapes");
      if (!a.rows.allFinite() || !a.targets.allFinite()) throw InvalidArgument("agent data must be finite");
    }
    L_ = 0.0;
    for (const auto& a : agents_) {
      double li = 0.0;
      if (family_ == ObjectiveFamily::het_quadratic) {
        li = detail::top_eigenvalue_gram(a.rows);
      } else {
        li = 2.0 * a.rows.rowwise().squaredNorm().sum() / static_cast<double>(a.rows.rows());
      }
      L_ = std::max(L_, li);
    }
  }

  ObjectiveFamily family() const { return family_; }
  int n() const { return static_cast<int>(agents_.size()); }
  int d() const { return d_; }
  double smoothness_constant() const { return L_; }
  double f_star_lower() const { return 0.0; }
  const AgentData& agent(int i) const { return agents_.at(static_cast<std::size_t>(i)); }

  double local_value(int i, const Vector& x) const {
    const auto& a = agent(i);
    const Vector r = a.rows * x - a.targets;
    if (family_ == ObjectiveFamily::het_quadratic) return 0.5 * r.squaredNorm();
    double s = 0.0;
    for (Eigen::Index j = 0; j < r.size(); ++j) s += r(j) * r(j) / (1.0 + r(j) * r(j));
    return s / static_cast<double>(r.size());
  }

  Vector local_grad(int i, const Vector& x) const {
    const auto& a = agent(i);
    Vector r = a.rows * x - a.targets;
    if (family_ == ObjectiveFamily::het_quadratic) return a.rows.transpose() * r;
    for (Eigen::Index j = 0; j < r.size(); ++j) {
      const double q = 1.0 + r(j) * r(j);
      r(j) = 2.0 * r(j) / (q * q);
    }
    return a.rows.transpose() * r / static_cast<double>(r.size());
  }

  double global_value(const Vector& x) const {
    double s = 0.0;
    for (int i = 0; i < n(); ++i) s += local_value(i, x);
    return s / n();
  }

  Vector global_grad(const Vector& x) const {
    Vector g = Vector::Zero(d_);
    for (int i = 0; i < n(); ++i) g += local_grad(i, x);
    return g / n();
  }

  // Closed-form minimiser of the global quadratic. Only for het_quadratic.
  Vector quadratic_minimizer() const {
    if (family_ != ObjectiveFamily::het_quadratic) throw InvalidArgument("minimizer is only available for het_quadratic");
    Matrix h = Matrix::Zero(d_, d_);
    Vector rhs = Vector::Zero(d_);
    for (const auto& a : agents_) {
      h += a.rows.transpose() * a.rows;
      rhs += a.rows.transpose() * a.targets;
    }
    return h.ldlt().solve(rhs);
  }

 private:
  ObjectiveFamily family_;
  std::vector<AgentData> agents_;
  int d_ = 0;
  double L_ = 0.0;
};

// Draws a suite. Agent i uses the stream derive_seed(seed, i). Heterogeneity
// enters through an agent-specific shift:
//   het_quadratic:     B_i ~ N(0, 1/m), c_i = B_i (h z_i) + 0.1 e_i
//   robust_regression: a_ij ~ N(h mu_i, I) / sqrt(d), y_ij = a_ij^T w + 0.1 e_ij
// with z_i, mu_i, e ~ N(0, I) and w a shared planted vector.
inline ObjectiveSuite generate_suite(ObjectiveFamily family, int n, int d, int rows, double heterogeneity,
                                     std::uint64_t seed) {
  if (n < 1 || d < 1 || rows < 1) throw InvalidArgument("generate_suite: n, d and rows must be positive");
  if (!(heterogeneity >= 0.0)) throw InvalidArgument("generate_suite: heterogeneity must be nonnegative");
  std::vector<AgentData> agents;
  agents.reserve(static_cast<std::size_t>(n));
  Rng shared(derive_seed(seed, 0xFFFF'FFFFULL));
  Vector planted(d);
  for (int k = 0; k < d; ++k) planted(k) = shared.normal();

  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    AgentData a{Matrix(rows, d), Vector(rows)};
    if (family == ObjectiveFamily::het_quadratic) {
      const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
      for (int r = 0; r < rows; ++r)
        for (int k = 0; k < d; ++k) a.rows(r, k) = rng.normal() * scale;
      Vector z(d);
      for (int k = 0; k < d; ++k) z(k) = rng.normal();
      a.targets = a.rows * (heterogeneity * z);
      for (int r = 0; r < rows; ++r) a.targets(r) += 0.1 * rng.normal();
    } else {
      Vector mu(d);
      for (int k = 0; k < d; ++k) mu(k) = rng.normal();
      const double scale = 1.0 / std::sqrt(static_cast<double>(d));
      for (int r = 0; r < rows; ++r)
        for (int k = 0; k < d; ++k) a.rows(r, k) = (heterogeneity * mu(k) + rng.normal()) * scale;
      a.targets = a.rows * planted;
      for (int r = 0; r < rows; ++r) a.targets(r) += 0.1 * rng.normal();
    }
    agents.push_back(std::move(a));
  }
  return ObjectiveSuite(family, std::move(agents));
}

// ---------------------------------------------------------------------------
// Heavy-tailed noise
// ---------------------------------------------------------------------------

// Default Pareto tail index for moment order p. (p + 2) / 2 keeps the variance
// infinite for p < 2; at p = 2 it would coincide with p, so 3 is used.
inline double default_tail_index(double p) { return p < 2.0 ? 0.5 * (p + 2.0) : 3.0; }

// Noise delta = s u with u uniform on the sphere and s Pareto(x_m, a).
// x_m = sigma ((a - p) / a)^(1/p) makes E ||delta||^p = sigma^p.
struct NoiseModel {
  double p = 1.5;
  double sigma = 1.0;
  double a = 1.75;

  static NoiseModel make(double p, double sigma, std::optional<double> tail_index = std::nullopt) {
    NoiseModel m{p, sigma, tail_index.value_or(default_tail_index(p))};
    if (!(p > 1.0 && p <= 2.0)) throw InvalidArgument("noise moment order p must lie in (1, 2]");
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw InvalidArgument("noise level sigma must be finite and >= 0");
    if (!(m.a > p) || !std::isfinite(m.a)) throw InvalidArgument("tail index must exceed p");
    return m;
  }

  double scale() const { return sigma * std::pow((a - p) / a, 1.0 / p); }
};

// Consumes one uniform for the radius, then d normals for the direction.
inline Vector heavy_tail_draw(const NoiseModel& noise, int d, Rng& rng) {
  if (d < 1) throw InvalidArgument("heavy_tail_draw: d must be positive");
  const double s = noise.scale() * std::pow(rng.uniform_open0(), -1.0 / noise.a);
  Vector u(d);
  double nrm = 0.0;
  do {
    for (int k = 0; k < d; ++k) u(k) = rng.normal();
    nrm = u.norm();
  } while (nrm == 0.0);
  return (s / nrm) * u;
}

// Exact local gradient plus the mean of b noise draws. With sigma = 0 no
// randomness is consumed.
inline Vector stochastic_batch_grad(const ObjectiveSuite& suite, int i, const Vector& x, const NoiseModel& noise,
                                    std::int64_t b, Rng& rng, std::int64_t* samples = nullptr) {
  if (b < 1) throw InvalidArgument("batch size must be at least 1");
  Vector g = suite.local_grad(i, x);
  if (samples) *samples += b;
  if (noise.sigma == 0.0) return g;
  Vector acc = Vector::Zero(suite.d());
  for (std::int64_t k = 0; k < b; ++k) acc += heavy_tail_draw(noise, suite.d(), rng);
  return g + acc / static_cast<double>(b);
}

// ---------------------------------------------------------------------------
// Fixture format
//   <family> <n> <d>
//   agent <i> <m>
//   m lines of d row values followed by the target
// ---------------------------------------------------------------------------

inline void write_suite(std::ostream& os, const ObjectiveSuite& suite) {
  os << to_string(suite.family()) << ' ' << suite.n() << ' ' << suite.d() << '\n' << std::setprecision(17);
  for (int i = 0; i < suite.n(); ++i) {
    const auto& a = suite.agent(i);
    os << "agent " << i << ' ' << a.rows.rows() << '\n';
    for (Eigen::Index r = 0; r < a.rows.rows(); ++r) {
      for (Eigen::Index k = 0; k < a.rows.cols(); ++k) os << a.rows(r, k) << ' ';
      os << a.targets(r) << '\n';
    }
  }
  if (!os) throw IoError("write_suite: stream failure");
}

inline ObjectiveSuite read_suite(std::istream& is) {
  std::string fam;
  int n = 0, d = 0;
  if (!(is >> fam >> n >> d) || n < 1 || d < 1) throw IoError("read_suite: bad header");
  const auto family = parse_objective_family(fam);
  if (!family) throw IoError("read_suite: unknown family '" + fam + "'");
  std::vector<AgentData> agents;
  for (int i = 0; i < n; ++i) {
    std::string tag;
    int idx = -1, m = 0;
    if (!(is >> tag >> idx >> m) || tag != "agent" || idx != i || m < 1) throw IoError("read_suite: bad agent block");
    AgentData a{Matrix(m, d), Vector(m)};
    for (int r = 0; r < m; ++r) {
      for (int k = 0; k < d; ++k)
        if (!(is >> a.rows(r, k))) throw IoError("read_suite: truncated data");
      if (!(is >> a.targets(r))) throw IoError("read_suite: truncated data");
    }
    agents.push_back(std::move(a));
  }
  return ObjectiveSuite(*family, std::move(agents));
}

}  // namespace decopt
