// Copyright (c) 2026 The decopt authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <queue>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "decopt/errors.hpp"
#include "decopt/rng.hpp"

namespace decopt {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace detail {

// Ceiling that ignores representation error just above an integer, so that
// closed forms such as 3276/0.1 squared land on the intended value.
inline std::int64_t ceil_int(double x) {
  const double nearest = std::nearbyint(x);
  if (std::abs(x - nearest) <= 1e-12 * std::max(1.0, std::abs(x))) return static_cast<std::int64_t>(nearest);
  return static_cast<std::int64_t>(std::ceil(x));
}

inline bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Topology
// ---------------------------------------------------------------------------

enum class TopologyKind { directed_ring, directed_exponential, undirected_ring, erdos_renyi, custom };

inline std::string_view to_string(TopologyKind k) {
  switch (k) {
    case TopologyKind::directed_ring: return "directed_ring";
    case TopologyKind::directed_exponential: return "directed_exponential";
    case TopologyKind::undirected_ring: return "undirected_ring";
    case TopologyKind::erdos_renyi: return "erdos_renyi";
    case TopologyKind::custom: return "custom";
  }
  return "custom";
}

inline std::optional<TopologyKind> parse_topology_kind(std::string_view s) {
  for (auto k : {TopologyKind::directed_ring, TopologyKind::directed_exponential,
                 TopologyKind::undirected_ring, TopologyKind::erdos_renyi, TopologyKind::custom}) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

using Edge = std::pair<int, int>;

// Communication graph. For directed graphs an edge (i, j) means agent i pulls
// from agent j, so row i of the mixing matrix is supported on {i} and the
// out-neighbours of i. Undirected edges are stored once with i <= j.
// Self-loops are always present.
class Topology {
 public:
  static Topology custom(int n, std::vector<Edge> edges, bool directed,
                         TopologyKind kind = TopologyKind::custom) {
    if (n < 1) throw InvalidArgument("topology needs n >= 1");
    Topology t(n, directed, kind);
    for (auto [i, j] : edges) t.add(i, j);
    for (int i = 0; i < n; ++i) t.add(i, i);
    t.finalize();
    if (!t.connected()) {
      throw InvalidArgument(std::string(directed ? "graph is not strongly connected"
                                                 : "graph is not connected"));
    }
    return t;
  }

  int n() const { return n_; }
  bool directed() const { return directed_; }
  TopologyKind kind() const { return kind_; }
  const std::vector<Edge>& edges() const { return edges_; }

  // True when row i of a mixing matrix may have a nonzero in column j.
  bool has_link(int i, int j) const { return adj_[static_cast<std::size_t>(i * n_ + j)] != 0; }

  // Neighbours of i excluding i itself.
  std::vector<int> out_neighbors(int i) const {
    std::vector<int> out;
    for (int j = 0; j < n_; ++j)
      if (j != i && has_link(i, j)) out.push_back(j);
    return out;
  }

  int out_degree(int i) const { return static_cast<int>(out_neighbors(i).size()); }

  // Strong connectivity via forward and reverse reachability from node 0.
  bool connected() const {
    auto reach = [&](bool reverse) {
      std::vector<char> seen(static_cast<std::size_t>(n_), 0);
      std::queue<int> q;
      q.push(0);
      seen[0] = 1;
      int count = 1;
      while (!q.empty()) {
        const int u = q.front();
        q.pop();
        for (int v = 0; v < n_; ++v) {
          const bool link = reverse ? has_link(v, u) : has_link(u, v);
          if (link && !seen[static_cast<std::size_t>(v)]) {
            seen[static_cast<std::size_t>(v)] = 1;
            ++count;
            q.push(v);
          }
        }
      }
      return count == n_;
    };
    return reach(false) && reach(true);
  }

 private:
  Topology(int n, bool directed, TopologyKind kind)
      : n_(n), directed_(directed), kind_(kind), adj_(static_cast<std::size_t>(n * n), 0) {}

  void add(int i, int j) {
    if (i < 0 || j < 0 || i >= n_ || j >= n_) throw InvalidArgument("edge endpoint out of range");
    adj_[static_cast<std::size_t>(i * n_ + j)] = 1;
    if (!directed_) adj_[static_cast<std::size_t>(j * n_ + i)] = 1;
  }

  void finalize() {
    edges_.clear();
    for (int i = 0; i < n_; ++i)
      for (int j = directed_ ? 0 : i; j < n_; ++j)
        if (has_link(i, j)) edges_.emplace_back(i, j);
  }

  int n_;
  bool directed_;
  TopologyKind kind_;
  std::vector<char> adj_;
  std::vector<Edge> edges_;
};

inline constexpr int kConnectivityRetries = 100;

// Builds one of the named topologies. Erdos-Renyi draws use the stream
// derive_seed(seed, attempt) for attempt = 0, 1, ..., and the first connected
// draw is returned.
inline Topology build_topology(TopologyKind kind, int n, std::optional<double> er_prob = std::nullopt,
                               std::optional<std::uint64_t> seed = std::nullopt) {
  if (n < 1) throw InvalidArgument("topology needs n >= 1");
  if (er_prob.has_value() != (kind == TopologyKind::erdos_renyi))
    throw InvalidArgument("er_prob must be given exactly for erdos_renyi");

  std::vector<Edge> edges;
  switch (kind) {
    case TopologyKind::directed_ring:
      for (int i = 0; i < n; ++i) edges.emplace_back(i, (i + 1) % n);
      return Topology::custom(n, edges, true, kind);
    case TopologyKind::directed_exponential: {
      if (!detail::is_power_of_two(n))
        throw InvalidArgument("directed_exponential requires n to be a power of two");
      for (int i = 0; i < n; ++i)
        for (int off = 1; off < n; off *= 2) edges.emplace_back(i, (i + off) % n);
      return Topology::custom(n, edges, true, kind);
    }
    case TopologyKind::undirected_ring:
      for (int i = 0; i < n; ++i) edges.emplace_back(i, (i + 1) % n);
      return Topology::custom(n, edges, false, kind);
    case TopologyKind::erdos_renyi: {
      const double p = *er_prob;
      if (!(p > 0.0 && p <= 1.0)) throw InvalidArgument("er_prob must lie in (0, 1]");
      const std::uint64_t base = seed.value_or(0);
      for (int attempt = 0; attempt < kConnectivityRetries; ++attempt) {
        Rng rng(derive_seed(base, static_cast<std::uint64_t>(attempt)));
        edges.clear();
        for (int i = 0; i < n; ++i)
          for (int j = i + 1; j < n; ++j)
            if (rng.uniform01() < p) edges.emplace_back(i, j);
        try {
          return Topology::custom(n, edges, false, kind);
        } catch (const InvalidArgument&) {
          continue;
        }
      }
      throw InvalidArgument("erdos_renyi: no connected draw within retry budget");
    }
    case TopologyKind::custom:
      break;
  }
  throw InvalidArgument("custom topologies are built with Topology::custom");
}

// Random strongly connected digraph: a Hamiltonian cycle over a random
// permutation plus each remaining ordered pair with probability extra_prob.
inline Topology build_random_digraph(int n, double extra_prob, std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("topology needs n >= 1");
  Rng rng(seed);
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  std::vector<Edge> edges;
  for (int k = 0; k < n; ++k)
    edges.emplace_back(perm[static_cast<std::size_t>(k)], perm[static_cast<std::size_t>((k + 1) % n)]);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j && rng.uniform01() < extra_prob) edges.emplace_back(i, j);
  return Topology::custom(n, edges, true);
}

// ---------------------------------------------------------------------------
// Mixing matrices
// ---------------------------------------------------------------------------

enum class StochasticKind { row_stochastic, doubly_stochastic };

inline std::string_view to_string(StochasticKind k) {
  return k == StochasticKind::doubly_stochastic ? "doubly_stochastic" : "row_stochastic";
}

struct WeightScheme {
  enum class Kind { uniform_out, weighted_self, lazy_metropolis };
  Kind kind = Kind::uniform_out;
  double alpha = 0.5;  // self weight for weighted_self

  static WeightScheme uniform_out() { return {Kind::uniform_out, 0.5}; }
  static WeightScheme weighted_self(double alpha) { return {Kind::weighted_self, alpha}; }
  static WeightScheme lazy_metropolis() { return {Kind::lazy_metropolis, 0.5}; }
};

inline std::string_view to_string(WeightScheme::Kind k) {
  switch (k) {
    case WeightScheme::Kind::uniform_out: return "uniform_out";
    case WeightScheme::Kind::weighted_self: return "weighted_self";
    case WeightScheme::Kind::lazy_metropolis: return "lazy_metropolis";
  }
  return "uniform_out";
}

inline std::optional<WeightScheme::Kind> parse_weight_scheme(std::string_view s) {
  for (auto k : {WeightScheme::Kind::uniform_out, WeightScheme::Kind::weighted_self,
                 WeightScheme::Kind::lazy_metropolis}) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

inline constexpr double kRowSumTol = 1e-12;
inline constexpr double kPsdTol = 1e-10;

inline double max_row_sum_error(const Matrix& a) {
  return (a.rowwise().sum().array() - 1.0).abs().maxCoeff();
}

inline double max_col_sum_error(const Matrix& a) {
  return (a.colwise().sum().array() - 1.0).abs().maxCoeff();
}

// Rows and columns both sum to one. Weaker than the undirected-network
// assumption (no symmetry or PSD requirement); this is what gradient tracking
// needs for mean preservation.
inline bool is_column_stochastic(const Matrix& a) { return max_col_sum_error(a) <= kRowSumTol; }

// Symmetric, doubly stochastic, 0 <= A <= I, and 1 spans null(I - A).
inline bool satisfies_undirected_assumption(const Matrix& a) {
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > kRowSumTol) return false;
  if (max_col_sum_error(a) > kRowSumTol || max_row_sum_error(a) > kRowSumTol) return false;
  const Matrix sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym, Eigen::EigenvaluesOnly);
  const Vector ev = es.eigenvalues();  // ascending
  if (ev(0) < -kPsdTol || ev(ev.size() - 1) > 1.0 + kPsdTol) return false;
  if (ev.size() >= 2 && ev(ev.size() - 2) > 1.0 - kPsdTol) return false;
  return true;
}

class MixingMatrix {
 public:
  // Validates the support and row sums, then classifies the matrix. The
  // doubly_stochastic kind is assigned only when the undirected-network
  // conditions hold numerically.
  static MixingMatrix from_weights(Topology topology, Matrix a) {
    const int n = topology.n();
    if (a.rows() != n || a.cols() != n) throw InvalidArgument("mixing matrix has wrong shape");
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const double v = a(i, j);
        if (!std::isfinite(v) || v < 0.0) throw InvalidArgument("mixing weights must be finite and nonnegative");
        const bool linked = topology.has_link(i, j);
        if (linked && !(v > 0.0)) throw InvalidArgument("missing positive weight on a graph edge or self-loop");
        if (!linked && v != 0.0) throw InvalidArgument("nonzero weight outside the graph's edge set");
      }
    }
    if (max_row_sum_error(a) > kRowSumTol) throw InvalidArgument("mixing matrix rows must sum to 1");
    const StochasticKind kind = satisfies_undirected_assumption(a) ? StochasticKind::doubly_stochastic
                                                                   : StochasticKind::row_stochastic;
    return MixingMatrix(std::move(topology), std::move(a), kind);
  }

  const Matrix& a() const { return a_; }
  int n() const { return static_cast<int>(a_.rows()); }
  StochasticKind kind() const { return kind_; }
  const Topology& topology() const { return topology_; }
  bool column_stochastic() const { return is_column_stochastic(a_); }

 private:
  MixingMatrix(Topology t, Matrix a, StochasticKind k) : a_(std::move(a)), kind_(k), topology_(std::move(t)) {}

  Matrix a_;
  StochasticKind kind_;
  Topology topology_;
};

inline MixingMatrix assign_weights(const Topology& topology, WeightScheme scheme) {
  const int n = topology.n();
  Matrix a = Matrix::Zero(n, n);
  switch (scheme.kind) {
    case WeightScheme::Kind::uniform_out:
      for (int i = 0; i < n; ++i) {
        const auto nb = topology.out_neighbors(i);
        const double w = 1.0 / static_cast<double>(nb.size() + 1);
        a(i, i) = w;
        for (int j : nb) a(i, j) = w;
      }
      break;
    case WeightScheme::Kind::weighted_self: {
      if (!(scheme.alpha > 0.0 && scheme.alpha < 1.0))
        throw InvalidArgument("weighted_self requires alpha in (0, 1)");
      for (int i = 0; i < n; ++i) {
        const auto nb = topology.out_neighbors(i);
        if (nb.empty()) {
          a(i, i) = 1.0;
          continue;
        }
        a(i, i) = scheme.alpha;
        for (int j : nb) a(i, j) = (1.0 - scheme.alpha) / static_cast<double>(nb.size());
      }
      break;
    }
    case WeightScheme::Kind::lazy_metropolis: {
      if (topology.directed()) throw InvalidArgument("lazy_metropolis requires an undirected topology");
      std::vector<int> deg(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) deg[static_cast<std::size_t>(i)] = topology.out_degree(i);
      for (int i = 0; i < n; ++i) {
        double off = 0.0;
        for (int j : topology.out_neighbors(i)) {
          const double w =
              1.0 / (2.0 * std::max(deg[static_cast<std::size_t>(i)], deg[static_cast<std::size_t>(j)]));
          a(i, j) = w;
          off += w;
        }
        a(i, i) = 1.0 - off;
      }
      break;
    }
  }
  return MixingMatrix::from_weights(topology, std::move(a));
}

// ---------------------------------------------------------------------------
// Spectral quantities
// ---------------------------------------------------------------------------

// Power iteration on A^T from the uniform vector, renormalised to unit sum
// each step. Stops when ||pi^T A - pi^T||_inf <= tol.
inline Vector perron_vector(const MixingMatrix& mix, double tol, std::int64_t max_iter) {
  if (!(tol > 0.0)) throw InvalidArgument("perron_vector: tol must be positive");
  const Matrix& a = mix.a();
  const int n = mix.n();
  const Matrix at = a.transpose();
  Vector pi = Vector::Constant(n, 1.0 / n);
  for (std::int64_t it = 0; it <= max_iter; ++it) {
    Vector next = at * pi;
    const double residual = (next - pi).cwiseAbs().maxCoeff();
    if (residual <= tol) {
      // Keep iterating while the residual still falls so pi ends up at
      // round-off accuracy rather than at tol.
      double best = residual;
      for (std::int64_t extra = 0; extra < max_iter; ++extra) {
        Vector cand = next / next.sum();
        next = at * cand;
        const double r = (next - cand).cwiseAbs().maxCoeff();
        if (r >= best) break;
        best = r;
        pi = std::move(cand);
      }
      if ((pi.array() <= 0.0).any()) throw NumericalError("perron_vector: non-positive entry");
      return pi;
    }
    pi = next / next.sum();
  }
  throw NonConvergence("perron_vector: no convergence within max_iter");
}

namespace detail {

// Left eigenvector for the eigenvalue nearest 1, from a dense solve.
inline Vector dense_perron(const Matrix& a) {
  Eigen::EigenSolver<Matrix> es(a.transpose());
  const auto vals = es.eigenvalues();
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < vals.size(); ++k)
    if (std::abs(vals(k) - 1.0) < std::abs(vals(best) - 1.0)) best = k;
  Vector pi = es.eigenvectors().col(best).real();
  pi /= pi.sum();
  return pi;
}

}  // namespace detail

inline constexpr double kPerronTol = 1e-12;
inline constexpr int kPerronWarmup = 50;
inline constexpr int kDenseFallbackMaxN = 64;

// Equilibrium vector with the library's iteration budget: a short warm-up
// estimates the contraction factor, the iteration cap is 100 * ceil(1 / (1 -
// estimate)), and small matrices fall back to a dense eigensolve.
inline Vector equilibrium_vector(const MixingMatrix& mix) {
  const Matrix at = mix.a().transpose();
  const int n = mix.n();
  Vector pi = Vector::Constant(n, 1.0 / n);
  double prev_res = 0.0, ratio = 0.0;
  for (int k = 0; k < kPerronWarmup; ++k) {
    Vector next = at * pi;
    const double res = (next - pi).cwiseAbs().maxCoeff();
    if (k > 0 && prev_res > 0.0) ratio = res / prev_res;
    prev_res = res;
    pi = next / next.sum();
  }
  const double beta_est = std::clamp(ratio, 0.0, 1.0 - 1e-9);
  const auto max_iter = static_cast<std::int64_t>(100.0 * std::ceil(1.0 / (1.0 - beta_est)));
  try {
    return perron_vector(mix, kPerronTol, max_iter);
  } catch (const NonConvergence&) {
    if (n > kDenseFallbackMaxN) throw;
    return detail::dense_perron(mix.a());
  }
}

struct SpectralProfile {
  Vector pi;
  double beta = 0.0;
  double kappa = 1.0;
  double theta = 2.0;
  int n = 1;
};

namespace detail {

// Largest eigenvalue of a symmetric PSD matrix by power iteration with a
// residual stopping rule ||S v - lambda v|| <= tol * lambda.
inline double top_eigenvalue_psd(const Matrix& s, double tol, std::int64_t max_iter, std::uint64_t seed) {
  const auto n = s.rows();
  Rng rng(seed);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = 1.0 + rng.uniform01();
  v.normalize();
  for (std::int64_t it = 0; it < max_iter; ++it) {
    const Vector sv = s * v;
    const double norm = sv.norm();
    if (norm == 0.0) return 0.0;
    const double lambda = v.dot(sv);
    if ((sv - lambda * v).norm() <= tol * std::max(lambda, 1e-300)) return lambda;
    v = sv / norm;
  }
  throw NonConvergence("power iteration for the top eigenvalue did not converge");
}

}  // namespace detail

inline constexpr double kBetaTol = 1e-10;
inline constexpr std::int64_t kBetaMaxIter = 2'000'000;

// beta = ||Pi^{1/2} (A - 1 pi^T) Pi^{-1/2}||_2 from power iteration on M^T M.
inline double weighted_deflated_norm(const Matrix& a, const Vector& pi) {
  const int n = static_cast<int>(a.rows());
  const Vector sq = pi.array().sqrt();
  const Matrix dev = a - Vector::Ones(n) * pi.transpose();
  const Matrix m = sq.asDiagonal() * dev * sq.cwiseInverse().asDiagonal();
  return std::sqrt(std::max(0.0, detail::top_eigenvalue_psd(m.transpose() * m, kBetaTol, kBetaMaxIter, 0x5eedULL)));
}

inline SpectralProfile spectral_profile(const MixingMatrix& mix) {
  SpectralProfile p;
  p.n = mix.n();
  p.pi = equilibrium_vector(mix);
  p.beta = weighted_deflated_norm(mix.a(), p.pi);
  if (p.beta >= 1.0 - 1e-9) throw NumericalError("mixing matrix does not contract: beta >= 1");
  p.kappa = p.pi.maxCoeff() / p.pi.minCoeff();
  p.theta = 2.0 * p.n * p.kappa;
  return p;
}

// K_min = ceil(3 (1 + ln(kappa n)) / (1 - beta)).
inline int min_mixing_steps(const SpectralProfile& p) {
  if (!(p.beta < 1.0)) throw InvalidArgument("min_mixing_steps requires beta < 1");
  return static_cast<int>(detail::ceil_int(3.0 * (1.0 + std::log(p.kappa * p.n)) / (1.0 - p.beta)));
}

inline Matrix matrix_power_apply(const Matrix& a, std::int64_t k, Matrix x) {
  if (a.cols() != x.rows()) throw InvalidArgument("matrix_power_apply: dimension mismatch");
  if (k < 0) throw InvalidArgument("matrix_power_apply: negative power");
  for (std::int64_t s = 0; s < k; ++s) x = a * x;
  return x;
}

inline Matrix matrix_power_apply(const MixingMatrix& mix, std::int64_t k, Matrix x) {
  return matrix_power_apply(mix.a(), k, std::move(x));
}

inline Matrix matrix_power(const Matrix& a, std::int64_t k) {
  return matrix_power_apply(a, k, Matrix::Identity(a.rows(), a.cols()));
}

inline constexpr double kDiagFloor = 1e-300;

// Diagonal of A^m for a nondecreasing sequence of m. Keeps one running power
// and multiplies it forward, so consecutive multiples of K cost K products each.
class PowerDiagonal {
 public:
  PowerDiagonal(const MixingMatrix& mix, const SpectralProfile& profile)
      : a_(mix.a()),
        power_(Matrix::Identity(mix.n(), mix.n())),
        theta_(profile.theta),
        k_min_(min_mixing_steps(profile)) {}

  Vector diag(std::int64_t m) {
    if (m < 1) throw InvalidArgument("diag_of_power requires m >= 1");
    if (m < m_) throw InvalidArgument("diag_of_power: powers must be requested in nondecreasing order");
    while (m_ < m) {
      power_ = power_ * a_;
      ++m_;
    }
    Vector d = power_.diagonal();
    if (d.minCoeff() <= kDiagFloor) throw NumericalError("diag_of_power: degenerate diagonal entry");
    if (m >= k_min_ && d.cwiseInverse().maxCoeff() > theta_ * (1.0 + 1e-9))
      throw NumericalError("diag_of_power: inverse diagonal exceeds theta = 2 n kappa");
    return d;
  }

  std::int64_t current_power() const { return m_; }
  const Matrix& power() const { return power_; }

 private:
  Matrix a_;
  Matrix power_;
  std::int64_t m_ = 0;
  double theta_;
  int k_min_;
};

inline Vector diag_of_power(const MixingMatrix& mix, std::int64_t m) {
  if (m < 1) throw InvalidArgument("diag_of_power requires m >= 1");
  Vector d = matrix_power(mix.a(), m).diagonal();
  if (d.minCoeff() <= kDiagFloor) throw NumericalError("diag_of_power: degenerate diagonal entry");
  return d;
}

// rho = ||A^K - 1 pi^T||_F.
inline double rho_of(const Matrix& a, std::int64_t k, const Vector& pi) {
  const auto n = a.rows();
  return (matrix_power(a, k) - Vector::Ones(n) * pi.transpose()).norm();
}

inline double rho_of(const MixingMatrix& mix, std::int64_t k, const Vector& pi) { return rho_of(mix.a(), k, pi); }

// ---------------------------------------------------------------------------
// Invariant suite
// ---------------------------------------------------------------------------

struct MatrixInvariantReport {
  double row_sum_error = 0.0;
  double perron_residual = 0.0;
  double power_identity_error = 0.0;  // max over K of |A^K - 1pi^T - (A - 1pi^T)^K|
  int contraction_violations = 0;     // ||A^K - 1pi^T||_F > sqrt(n kappa) beta^K
  double min_diag_margin = 0.0;       // min_i [A^Kmin]_ii - 1/(2 n kappa)
  int drift_violations = 0;           // ||D_t^-1 - D_{t+1}^-1||_F bound
  double max_weighted_inverse = 0.0;  // max_t ||pi^T D_t^-1|| / sqrt(2n)
  std::vector<std::string> failures;

  bool ok() const { return failures.empty(); }
};

// Evaluates the deterministic matrix identities and bounds for A. The power
// identity and contraction bound are checked for K = 1..max_k; the diagonal
// bounds use K = K_min and t = 0..5.
inline MatrixInvariantReport check_matrix_invariants(const MixingMatrix& mix, const SpectralProfile& prof,
                                                     int max_k = 30) {
  MatrixInvariantReport r;
  const Matrix& a = mix.a();
  const int n = mix.n();
  const Matrix proj = Vector::Ones(n) * prof.pi.transpose();
  const Matrix dev = a - proj;

  r.row_sum_error = max_row_sum_error(a);
  if (r.row_sum_error > kRowSumTol) r.failures.push_back("row_stochastic");

  r.perron_residual = (a.transpose() * prof.pi - prof.pi).cwiseAbs().maxCoeff();
  if (r.perron_residual > 1e-10) r.failures.push_back("perron_residual");

  Matrix ak = Matrix::Identity(n, n), devk = Matrix::Identity(n, n);
  const double c = std::sqrt(n * prof.kappa);
  for (int k = 1; k <= max_k; ++k) {
    ak = ak * a;
    devk = devk * dev;
    if (k <= 20) r.power_identity_error = std::max(r.power_identity_error, ((ak - proj) - devk).cwiseAbs().maxCoeff());
    const double lhs = (ak - proj).norm();
    const double rhs = c * std::pow(prof.beta, k);
    if (lhs > rhs * (1.0 + 1e-9) + 1e-13) ++r.contraction_violations;
  }
  if (r.power_identity_error > 1e-10) r.failures.push_back("power_identity");
  if (r.contraction_violations > 0) r.failures.push_back("contraction_bound");

  const int kmin = min_mixing_steps(prof);
  const Matrix akmin = matrix_power(a, kmin);
  r.min_diag_margin = akmin.diagonal().minCoeff() - 1.0 / prof.theta;
  if (r.min_diag_margin < -1e-12) r.failures.push_back("diagonal_bound");

  // D_t = Diag(A^{(t+1) K_min}).
  PowerDiagonal pd(mix, prof);
  Vector dinv = pd.diag(kmin).cwiseInverse();
  const double drift_const = 2.0 * prof.theta * n * n * std::pow(prof.kappa, 1.5);
  for (int t = 0; t <= 5; ++t) {
    const Vector next = pd.diag(static_cast<std::int64_t>(t + 2) * kmin).cwiseInverse();
    const double lhs = (dinv - next).norm();
    const double rhs = drift_const * std::pow(prof.beta, static_cast<double>(t + 1) * kmin);
    if (lhs > rhs * (1.0 + 1e-9) + 1e-13) ++r.drift_violations;
    r.max_weighted_inverse =
        std::max(r.max_weighted_inverse, prof.pi.cwiseProduct(dinv).norm() / std::sqrt(2.0 * n));
    dinv = next;
  }
  if (r.drift_violations > 0) r.failures.push_back("diagonal_drift_bound");
  if (r.max_weighted_inverse > 1.0 + 1e-12) r.failures.push_back("weighted_inverse_bound");
  return r;
}

// ---------------------------------------------------------------------------
// Plain-text matrix format: "n kind" then n rows of n values.
// ---------------------------------------------------------------------------

inline void write_matrix(std::ostream& os, const MixingMatrix& mix) {
  const int n = mix.n();
  os << n << ' ' << to_string(mix.kind()) << '\n';
  os << std::setprecision(17);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (j) os << ' ';
      os << mix.a()(i, j);
    }
    os << '\n';
  }
  if (!os) throw IoError("write_matrix: stream failure");
}

// The topology is rebuilt from the support: undirected when the support is
// symmetric, directed otherwise. The stored kind must match the numerical
// classification.
inline MixingMatrix read_matrix(std::istream& is) {
  int n = 0;
  std::string kind;
  if (!(is >> n >> kind) || n < 1) throw IoError("read_matrix: bad header");
  Matrix a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (!(is >> a(i, j))) throw IoError("read_matrix: truncated matrix");
  bool symmetric = true;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if ((a(i, j) > 0.0) != (a(j, i) > 0.0)) symmetric = false;
  std::vector<Edge> edges;
  for (int i = 0; i < n; ++i)
    for (int j = symmetric ? i : 0; j < n; ++j)
      if (i != j && a(i, j) > 0.0) edges.emplace_back(i, j);
  auto mix = MixingMatrix::from_weights(Topology::custom(n, edges, !symmetric), std::move(a));
  if (to_string(mix.kind()) != kind) throw IoError("read_matrix: stored kind '" + kind + "' does not match matrix");
  return mix;
}

}  // namespace decopt
