// Copyright (c) 2026 The decopt authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <type_traits>
#include <vector>

#include "decopt/algos.hpp"
#include "decopt/errors.hpp"
#include "decopt/metrics.hpp"
#include "decopt/net_topology.hpp"
#include "decopt/oracle.hpp"
#include "decopt/rng.hpp"

namespace decopt {

// ---------------------------------------------------------------------------
// Configuration
//
// Flat "section.key = value" lines. '#' starts a comment, blank lines are
// ignored, and every key may appear at most once. Recognised keys and
// defaults:
//
//   topology.kind           directed_exponential
//   topology.n              8
//   topology.weights        uniform_out | weighted_self | lazy_metropolis
//   topology.alpha          0.5     (weighted_self only)
//   topology.er_prob        -       (required for erdos_renyi)
//   topology.seed           0
//   topology.matrix_file    -       (required for custom)
//   algorithm               dnsgd_pd | dnsgd | dsgt
//   objective.family        het_quadratic | robust_regression
//   objective.d             32
//   objective.rows          50
//   objective.heterogeneity 1.0
//   objective.seed          0
//   noise.p                 1.5
//   noise.sigma             1.0
//   noise.tail_index        default_tail_index(p)
//   run.schedule            manual | theorem(<eps>)
//   run.eta                 0.01
//   run.b                   20
//   run.K                   K_min (dnsgd_pd), rounds for contraction 1/2 (dnsgd), 1 (dsgt)
//   run.K_hat               run.K
//   run.T                   1000
//   run.budget_cap          9007199254740992
//   run.decimation          0       (0 selects the automatic rule)
//   seeds                   1       (comma separated)
//   output.dir              out
//   output.threshold        0.1     (gradient-norm level for *_to_threshold)
//   monitors.enabled        true
//   monitors.strict         false
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  TopologyKind topology_kind = TopologyKind::directed_exponential;
  int n = 8;
  WeightScheme::Kind weights = WeightScheme::Kind::uniform_out;
  double alpha = 0.5;
  std::optional<double> er_prob;
  std::uint64_t topology_seed = 0;
  std::string matrix_file;

  Algorithm algorithm = Algorithm::dnsgd_pd;

  ObjectiveFamily family = ObjectiveFamily::het_quadratic;
  int d = 32;
  int rows = 50;
  double heterogeneity = 1.0;
  std::uint64_t objective_seed = 0;

  double p = 1.5;
  double sigma = 1.0;
  std::optional<double> tail_index;

  std::optional<double> theorem_eps;  // set when run.schedule = theorem(eps)
  double eta = 0.01;
  std::int64_t b = 20;
  std::optional<std::int64_t> K;
  std::optional<std::int64_t> K_hat;
  std::int64_t T = 1000;
  double budget_cap = 9007199254740992.0;
  std::int64_t decimation = 0;

  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "out";
  double threshold = 0.1;
  bool monitors = true;
  bool strict = false;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

inline std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE) return std::nullopt;
  return v;
}

inline std::optional<std::int64_t> parse_int(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (end != s.c_str() + s.size() || errno == ERANGE) return std::nullopt;
  return static_cast<std::int64_t>(v);
}

inline std::optional<std::uint64_t> parse_uint(const std::string& s) {
  if (s.empty() || s[0] == '-') return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  if (end != s.c_str() + s.size() || errno == ERANGE) return std::nullopt;
  return static_cast<std::uint64_t>(v);
}

inline std::optional<bool> parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  return std::nullopt;
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

struct PreparedExperiment;

namespace detail {
inline void check_compatibility(const ExperimentConfig& cfg, std::vector<std::string>& errs);
}

// Parses and validates a config document. Every problem found is reported in
// one ConfigError.
inline ExperimentConfig parse_config(std::string_view text) {
  using detail::parse_bool, detail::parse_double, detail::parse_int, detail::parse_uint, detail::trim;
  ExperimentConfig c;
  std::vector<std::string> errs;
  std::map<std::string, std::pair<std::string, int>> kv;

  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      errs.push_back("line " + std::to_string(lineno) + ": expected key = value");
      continue;
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string val = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) {
      errs.push_back("line " + std::to_string(lineno) + ": empty key");
      continue;
    }
    if (!kv.emplace(key, std::make_pair(val, lineno)).second)
      errs.push_back("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
  }

  auto bad = [&](const std::string& key, const std::string& what) { errs.push_back(key + ": " + what); };
  auto take = [&](const std::string& key) -> std::optional<std::string> {
    auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    std::string v = it->second.first;
    kv.erase(it);
    return v;
  };
  auto take_double = [&](const std::string& key, auto&& apply) {
    if (auto v = take(key)) {
      if (auto d = parse_double(*v); d && std::isfinite(*d)) apply(*d);
      else bad(key, "malformed number '" + *v + "'");
    }
  };
  auto take_int = [&](const std::string& key, auto&& apply) {
    if (auto v = take(key)) {
      if (auto d = parse_int(*v)) apply(*d);
      else bad(key, "malformed integer '" + *v + "'");
    }
  };
  auto take_uint = [&](const std::string& key, std::uint64_t& out) {
    if (auto v = take(key)) {
      if (auto d = parse_uint(*v)) out = *d;
      else bad(key, "malformed seed '" + *v + "'");
    }
  };
  auto take_bool = [&](const std::string& key, bool& out) {
    if (auto v = take(key)) {
      if (auto d = parse_bool(*v)) out = *d;
      else bad(key, "expected true or false, got '" + *v + "'");
    }
  };

  if (auto v = take("topology.kind")) {
    if (auto k = parse_topology_kind(*v)) c.topology_kind = *k;
    else bad("topology.kind", "unknown topology '" + *v + "'");
  }
  take_int("topology.n", [&](std::int64_t v) {
    if (v < 1 || v > 4096) bad("topology.n", "must lie in [1, 4096]");
    else c.n = static_cast<int>(v);
  });
  if (auto v = take("topology.weights")) {
    if (auto k = parse_weight_scheme(*v)) c.weights = *k;
    else bad("topology.weights", "unknown weight scheme '" + *v + "'");
  }
  take_double("topology.alpha", [&](double v) {
    if (!(v > 0.0 && v < 1.0)) bad("topology.alpha", "must lie in (0, 1)");
    c.alpha = v;
  });
  take_double("topology.er_prob", [&](double v) {
    if (!(v > 0.0 && v <= 1.0)) bad("topology.er_prob", "must lie in (0, 1]");
    c.er_prob = v;
  });
  take_uint("topology.seed", c.topology_seed);
  if (auto v = take("topology.matrix_file")) c.matrix_file = *v;

  if (auto v = take("algorithm")) {
    if (auto a = parse_algorithm(*v)) c.algorithm = *a;
    else bad("algorithm", "unknown algorithm '" + *v + "'");
  }

  if (auto v = take("objective.family")) {
    if (auto f = parse_objective_family(*v)) c.family = *f;
    else bad("objective.family", "unknown family '" + *v + "'");
  }
  take_int("objective.d", [&](std::int64_t v) {
    if (v < 1 || v > 100000) bad("objective.d", "must lie in [1, 100000]");
    else c.d = static_cast<int>(v);
  });
  take_int("objective.rows", [&](std::int64_t v) {
    if (v < 1 || v > 1000000) bad("objective.rows", "must lie in [1, 1000000]");
    else c.rows = static_cast<int>(v);
  });
  take_double("objective.heterogeneity", [&](double v) {
    if (v < 0.0) bad("objective.heterogeneity", "must be nonnegative");
    c.heterogeneity = v;
  });
  take_uint("objective.seed", c.objective_seed);

  take_double("noise.p", [&](double v) {
    if (!(v > 1.0 && v <= 2.0)) bad("noise.p", "p must lie in (1, 2]");
    c.p = v;
  });
  take_double("noise.sigma", [&](double v) {
    if (v < 0.0) bad("noise.sigma", "must be nonnegative");
    c.sigma = v;
  });
  take_double("noise.tail_index", [&](double v) { c.tail_index = v; });

  if (auto v = take("run.schedule")) {
    if (*v == "manual") {
      c.theorem_eps.reset();
    } else if (v->rfind("theorem(", 0) == 0 && v->back() == ')') {
      const std::string inner = trim(std::string_view(*v).substr(8, v->size() - 9));
      auto e = parse_double(inner);
      if (!e || !(*e > 0.0) || !std::isfinite(*e)) bad("run.schedule", "theorem(eps) needs a positive eps");
      else c.theorem_eps = *e;
    } else {
      bad("run.schedule", "expected manual or theorem(<eps>), got '" + *v + "'");
    }
  }
  take_double("run.eta", [&](double v) {
    if (v < 0.0) bad("run.eta", "must be nonnegative");
    c.eta = v;
  });
  take_int("run.b", [&](std::int64_t v) {
    if (v < 1) bad("run.b", "must be >= 1");
    c.b = v;
  });
  take_int("run.K", [&](std::int64_t v) {
    if (v < 1) bad("run.K", "must be >= 1");
    c.K = v;
  });
  take_int("run.K_hat", [&](std::int64_t v) {
    if (v < 1) bad("run.K_hat", "must be >= 1");
    c.K_hat = v;
  });
  take_int("run.T", [&](std::int64_t v) {
    if (v < 1) bad("run.T", "must be >= 1");
    c.T = v;
  });
  take_double("run.budget_cap", [&](double v) {
    if (!(v >= 1.0)) bad("run.budget_cap", "must be >= 1");
    c.budget_cap = v;
  });
  take_int("run.decimation", [&](std::int64_t v) {
    if (v < 0) bad("run.decimation", "must be >= 0");
    c.decimation = v;
  });

  if (auto v = take("seeds")) {
    c.seeds.clear();
    std::istringstream ss(*v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (auto s = parse_uint(trim(tok))) c.seeds.push_back(*s);
      else bad("seeds", "malformed seed '" + trim(tok) + "'");
    }
    if (c.seeds.empty()) bad("seeds", "at least one seed is required");
  }
  if (auto v = take("output.dir")) c.output_dir = *v;
  take_double("output.threshold", [&](double v) {
    if (!(v > 0.0)) bad("output.threshold", "must be positive");
    c.threshold = v;
  });
  take_bool("monitors.enabled", c.monitors);
  take_bool("monitors.strict", c.strict);

  for (const auto& [key, val] : kv) errs.push_back("line " + std::to_string(val.second) + ": unknown key '" + key + "'");

  // Cross-field rules.
  const double tail = c.tail_index.value_or(default_tail_index(c.p));
  if (!(tail > c.p)) errs.push_back("noise.tail_index: must exceed p");
  if (c.topology_kind == TopologyKind::erdos_renyi && !c.er_prob)
    errs.push_back("topology.er_prob: required for erdos_renyi");
  if (c.topology_kind != TopologyKind::erdos_renyi && c.er_prob)
    errs.push_back("topology.er_prob: only valid for erdos_renyi");
  if (c.topology_kind == TopologyKind::custom && c.matrix_file.empty())
    errs.push_back("topology.matrix_file: required for custom topologies");
  if (c.topology_kind == TopologyKind::directed_exponential && !detail::is_power_of_two(c.n))
    errs.push_back("topology.n: directed_exponential requires a power of two");
  const bool directed_kind =
      c.topology_kind == TopologyKind::directed_ring || c.topology_kind == TopologyKind::directed_exponential;
  if (c.weights == WeightScheme::Kind::lazy_metropolis && directed_kind)
    errs.push_back("topology.weights: lazy_metropolis requires an undirected topology");

  if (errs.empty()) detail::check_compatibility(c, errs);
  if (!errs.empty()) throw ConfigError(std::move(errs));
  return c;
}

// Canonical text form. Two configs with the same canonical text describe the
// same experiment; seeds and output settings are emitted last.
inline std::string to_text(const ExperimentConfig& c, bool include_run_outputs = true) {
  std::ostringstream o;
  o << "topology.kind = " << to_string(c.topology_kind) << '\n';
  o << "topology.n = " << c.n << '\n';
  o << "topology.weights = " << to_string(c.weights) << '\n';
  if (c.weights == WeightScheme::Kind::weighted_self) o << "topology.alpha = " << detail::fmt_double(c.alpha) << '\n';
  if (c.er_prob) o << "topology.er_prob = " << detail::fmt_double(*c.er_prob) << '\n';
  o << "topology.seed = " << c.topology_seed << '\n';
  if (!c.matrix_file.empty()) o << "topology.matrix_file = " << c.matrix_file << '\n';
  o << "algorithm = " << to_string(c.algorithm) << '\n';
  o << "objective.family = " << to_string(c.family) << '\n';
  o << "objective.d = " << c.d << '\n';
  o << "objective.rows = " << c.rows << '\n';
  o << "objective.heterogeneity = " << detail::fmt_double(c.heterogeneity) << '\n';
  o << "objective.seed = " << c.objective_seed << '\n';
  o << "noise.p = " << detail::fmt_double(c.p) << '\n';
  o << "noise.sigma = " << detail::fmt_double(c.sigma) << '\n';
  if (c.tail_index) o << "noise.tail_index = " << detail::fmt_double(*c.tail_index) << '\n';
  if (c.theorem_eps) {
    o << "run.schedule = theorem(" << detail::fmt_double(*c.theorem_eps) << ")\n";
  } else {
    o << "run.schedule = manual\n";
    o << "run.eta = " << detail::fmt_double(c.eta) << '\n';
    o << "run.b = " << c.b << '\n';
    if (c.K) o << "run.K = " << *c.K << '\n';
    if (c.K_hat) o << "run.K_hat = " << *c.K_hat << '\n';
    o << "run.T = " << c.T << '\n';
  }
  o << "run.budget_cap = " << detail::fmt_double(c.budget_cap) << '\n';
  o << "run.decimation = " << c.decimation << '\n';
  o << "monitors.enabled = " << (c.monitors ? "true" : "false") << '\n';
  o << "monitors.strict = " << (c.strict ? "true" : "false") << '\n';
  if (include_run_outputs) {
    o << "seeds = ";
    for (std::size_t i = 0; i < c.seeds.size(); ++i) o << (i ? "," : "") << c.seeds[i];
    o << '\n';
    o << "output.dir = " << c.output_dir << '\n';
    o << "output.threshold = " << detail::fmt_double(c.threshold) << '\n';
  }
  return o.str();
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Identifies the experiment independent of seeds and output location.
inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_text(c, false))));
  return buf;
}

// ---------------------------------------------------------------------------
// Experiment assembly
// ---------------------------------------------------------------------------

inline MixingMatrix build_mixing(const ExperimentConfig& c) {
  if (c.topology_kind == TopologyKind::custom) {
    std::ifstream f(c.matrix_file);
    if (!f) throw IoError("cannot open matrix file '" + c.matrix_file + "'");
    auto mix = read_matrix(f);
    if (mix.n() != c.n) throw InvalidArgument("matrix file has n = " + std::to_string(mix.n()));
    return mix;
  }
  const auto topo = build_topology(c.topology_kind, c.n, c.er_prob,
                                   c.topology_kind == TopologyKind::erdos_renyi
                                       ? std::optional<std::uint64_t>(c.topology_seed)
                                       : std::nullopt);
  return assign_weights(topo, WeightScheme{c.weights, c.alpha});
}

struct PreparedExperiment {
  ExperimentConfig config;
  MixingMatrix mix;
  SpectralProfile profile;
  ObjectiveSuite suite;
  NoiseModel noise;
  RunParams params;
  Vector x0;
};

inline RunParams resolve_params(const ExperimentConfig& c, const SpectralProfile& prof, const ObjectiveSuite& suite,
                                const Vector& x0) {
  if (c.theorem_eps) {
    TheoremInputs in;
    in.L = suite.smoothness_constant();
    const double f_low = suite.family() == ObjectiveFamily::het_quadratic
                             ? suite.global_value(suite.quadratic_minimizer())
                             : suite.f_star_lower();
    in.Delta = std::max(suite.global_value(x0) - f_low, std::numeric_limits<double>::min());
    in.eps = *c.theorem_eps;
    in.sigma = c.sigma;
    in.p = c.p;
    in.n = c.n;
    in.budget_cap = c.budget_cap;
    for (int i = 0; i < c.n; ++i) in.grad0_norms.push_back(suite.local_grad(i, x0).norm());
    return theorem_params(mode_of(c.algorithm), in, prof);
  }
  RunParams r;
  r.eta = c.eta;
  r.b = c.b;
  r.T = c.T;
  if (c.K) {
    r.K = *c.K;
  } else {
    switch (c.algorithm) {
      case Algorithm::dnsgd_pd: r.K = min_mixing_steps(prof); break;
      case Algorithm::dnsgd: r.K = accelerated_rounds_for(prof.beta, 0.5); break;
      case Algorithm::dsgt: r.K = 1; break;
    }
  }
  r.K_hat = c.K_hat.value_or(r.K);
  return r;
}

inline PreparedExperiment prepare(const ExperimentConfig& c) {
  MixingMatrix mix = build_mixing(c);
  SpectralProfile prof = spectral_profile(mix);
  ObjectiveSuite suite = generate_suite(c.family, c.n, c.d, c.rows, c.heterogeneity, c.objective_seed);
  NoiseModel noise = NoiseModel::make(c.p, c.sigma, c.tail_index);
  Vector x0 = Vector::Zero(c.d);
  RunParams params = resolve_params(c, prof, suite, x0);
  params.validate();
  return PreparedExperiment{c, std::move(mix), std::move(prof), std::move(suite), noise, params, std::move(x0)};
}

namespace detail {

inline void check_compatibility(const ExperimentConfig& c, std::vector<std::string>& errs) {
  try {
    const MixingMatrix mix = build_mixing(c);
    if (c.algorithm == Algorithm::dnsgd && mix.kind() != StochasticKind::doubly_stochastic) {
      errs.push_back("algorithm: dnsgd on this topology: doubly-stochastic required");
      return;
    }
    if (c.algorithm == Algorithm::dsgt && !mix.column_stochastic()) {
      errs.push_back("algorithm: dsgt on this topology: doubly-stochastic required");
      return;
    }
    const SpectralProfile prof = spectral_profile(mix);
    if (c.algorithm == Algorithm::dnsgd_pd && c.K && !c.theorem_eps) {
      const int kmin = min_mixing_steps(prof);
      if (*c.K < kmin) errs.push_back("run.K: dnsgd_pd needs K >= " + std::to_string(kmin));
    }
    if (c.theorem_eps) {
      const ObjectiveSuite suite = generate_suite(c.family, c.n, c.d, c.rows, c.heterogeneity, c.objective_seed);
      resolve_params(c, prof, suite, Vector::Zero(c.d));
    }
  } catch (const Error& e) {
    errs.push_back(std::string("topology/run: ") + e.what());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

enum class RunStatus { ok, monitor_violation, diverged };

inline std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::ok: return "ok";
    case RunStatus::monitor_violation: return "monitor_violation";
    case RunStatus::diverged: return "diverged";
  }
  return "ok";
}

struct RunResult {
  MetricsTable table;
  RunStatus status = RunStatus::ok;
  std::string abort_reason;
  std::int64_t violation_count = 0;
  RunParams params;
};

inline std::int64_t decimation_factor(const ExperimentConfig& c, std::int64_t T) {
  if (c.decimation > 0) return c.decimation;
  return T <= 2000 ? 1 : (T + 1999) / 2000;
}

// Optional hook called after every step, before monitors run. Tests use it to
// corrupt state and confirm the monitors notice.
using StepHook = std::function<void(IterState&)>;

namespace detail {

template <class State, class StepFn>
void drive(const PreparedExperiment& ex, State& s, const MonitorContext& ctx, StepFn step, RunResult& res,
           const StepHook& hook) {
  const auto& c = ex.config;
  const std::int64_t T = ex.params.T;
  const std::int64_t every = decimation_factor(c, T);
  std::vector<std::string> pending;
  res.table.push_back(make_record(ctx, s));
  auto d_inv = [](const State& st) {
    if constexpr (std::is_same_v<State, PdState>) return Vector(st.d_cur.cwiseInverse());
    else return Vector();
  };
  for (std::int64_t t = 1; t <= T; ++t) {
    StepSnapshot prev;
    if (c.monitors) prev = snapshot(s);
    try {
      step(s);
    } catch (const DivergenceError& e) {
      res.status = RunStatus::diverged;
      res.abort_reason = e.what();
      return;
    }
    if (hook) hook(s);
    std::vector<std::string> found;
    if (c.monitors) found = step_monitors(ctx, prev, s, d_inv(s));
    if (!found.empty()) {
      ++res.violation_count;
      for (auto& f : found)
        if (std::find(pending.begin(), pending.end(), f) == pending.end()) pending.push_back(f);
    }
    const bool strict_abort = !found.empty() && c.strict;
    if (t % every == 0 || t == T || strict_abort) {
      MetricsRecord r = make_record(ctx, s);
      r.violations = std::move(pending);
      pending.clear();
      res.table.push_back(std::move(r));
    }
    if (!found.empty() && res.status == RunStatus::ok) {
      res.status = RunStatus::monitor_violation;
      res.abort_reason = MonitorViolation(t, found).what();
    }
    if (strict_abort) return;
  }
}

}  // namespace detail

// Runs one seed. Agent i draws from the stream derive_seed(seed, i).
inline RunResult run_experiment(const PreparedExperiment& ex, std::uint64_t seed, const StepHook& hook = {}) {
  RunResult res;
  res.params = ex.params;
  auto rngs = agent_streams(seed, ex.mix.n());
  const MonitorContext ctx = make_monitor_context(ex.config.algorithm, ex.mix, ex.profile, ex.params, ex.suite);
  try {
    switch (ex.config.algorithm) {
      case Algorithm::dnsgd_pd: {
        PdState s = dnsgd_pd_init(ex.mix, ex.profile, ex.suite, ex.noise, ex.params, ex.x0, rngs);
        detail::drive(ex, s, ctx,
                      [&](PdState& st) { dnsgd_pd_step(st, ex.mix, ex.suite, ex.noise, ex.params, rngs); }, res,
                      hook);
        break;
      }
      case Algorithm::dnsgd: {
        UnState s = dnsgd_un_init(ex.mix, ex.profile, ex.suite, ex.noise, ex.params, ex.x0, rngs);
        detail::drive(
            ex, s, ctx,
            [&](UnState& st) { dnsgd_un_step(st, ex.mix, ex.profile, ex.suite, ex.noise, ex.params, rngs); }, res,
            hook);
        break;
      }
      case Algorithm::dsgt: {
        UnState s = dsgt_init(ex.mix, ex.suite, ex.noise, ex.params, ex.x0, rngs);
        detail::drive(ex, s, ctx,
                      [&](UnState& st) { dsgt_step(st, ex.mix, ex.suite, ex.noise, ex.params, rngs); }, res, hook);
        break;
      }
    }
  } catch (const DivergenceError& e) {
    res.status = RunStatus::diverged;
    res.abort_reason = e.what();
  }
  return res;
}

inline RunResult run_experiment(const ExperimentConfig& c, std::uint64_t seed) { return run_experiment(prepare(c), seed); }

// ---------------------------------------------------------------------------
// CSV persistence
// ---------------------------------------------------------------------------

inline constexpr std::string_view kCsvHeader =
    "t,f_value,grad_norm_w,consensus_x,consensus_v,deviation,lyapunov,samples,comms,violations";

inline void write_csv(std::ostream& os, const MetricsTable& table) {
  os << kCsvHeader << '\n';
  for (const auto& r : table) {
    os << r.t << ',' << detail::fmt_double(r.f_value) << ',' << detail::fmt_double(r.grad_norm_w) << ','
       << detail::fmt_double(r.consensus_x) << ',' << detail::fmt_double(r.consensus_v) << ','
       << detail::fmt_double(r.deviation) << ',' << detail::fmt_double(r.lyapunov) << ',' << r.samples << ','
       << r.comms << ',';
    for (std::size_t i = 0; i < r.violations.size(); ++i) os << (i ? ";" : "") << r.violations[i];
    os << '\n';
  }
}

inline MetricsTable read_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kCsvHeader) throw IoError("read_csv: missing or unexpected header");
  MetricsTable out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const auto comma = line.find(',', start);
      f.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (f.size() != 10) throw IoError("read_csv: line " + std::to_string(lineno) + " has wrong field count");
    auto num = [&](const std::string& s) {
      char* end = nullptr;
      const double v = std::strtod(s.c_str(), &end);
      if (s.empty() || end != s.c_str() + s.size())
        throw IoError("read_csv: line " + std::to_string(lineno) + ": bad number '" + s + "'");
      return v;
    };
    auto integer = [&](const std::string& s) {
      auto v = detail::parse_int(s);
      if (!v) throw IoError("read_csv: line " + std::to_string(lineno) + ": bad integer '" + s + "'");
      return *v;
    };
    MetricsRecord r;
    r.t = integer(f[0]);
    r.f_value = num(f[1]);
    r.grad_norm_w = num(f[2]);
    r.consensus_x = num(f[3]);
    r.consensus_v = num(f[4]);
    r.deviation = num(f[5]);
    r.lyapunov = num(f[6]);
    r.samples = integer(f[7]);
    r.comms = integer(f[8]);
    if (!f[9].empty()) {
      std::istringstream vs(f[9]);
      std::string name;
      while (std::getline(vs, name, ';')) r.violations.push_back(name);
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline void emit_csv(const MetricsTable& table, const std::filesystem::path& path) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  write_csv(f, table);
  f.flush();
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

inline MetricsTable load_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  try {
    return read_csv(f);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Summaries
// ---------------------------------------------------------------------------

// Linear-interpolation quantile of a sample.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw InvalidArgument("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0 || v[lo] == v[hi]) return v[lo];
  return v[lo] + frac * (v[hi] - v[lo]);
}

struct Aggregate {
  double median = 0.0;
  double iqr = 0.0;
};

inline Aggregate aggregate(const std::vector<double>& v) {
  return {quantile(v, 0.5), quantile(v, 0.75) - quantile(v, 0.25)};
}

struct SummaryRow {
  std::string config_hash;
  std::string label;
  std::size_t runs = 0;
  Aggregate final_grad, min_grad, consensus_x, consensus_v, samples_to_threshold, comms_to_threshold;
};

using SummaryTable = std::vector<SummaryRow>;

struct SummaryInput {
  std::string config_hash;
  std::string label;
  std::vector<std::filesystem::path> csv_paths;
};

// First recorded counter value at which grad_norm_w <= threshold, or +inf.
inline double samples_to_threshold(const MetricsTable& t, double threshold, bool comms = false) {
  for (const auto& r : t)
    if (r.grad_norm_w <= threshold) return static_cast<double>(comms ? r.comms : r.samples);
  return std::numeric_limits<double>::infinity();
}

// Aggregates are computed from the CSV files on disk, so a summary can be
// regenerated without rerunning.
inline SummaryTable summarize(const std::vector<SummaryInput>& inputs, double threshold) {
  SummaryTable out;
  for (const auto& in : inputs) {
    std::vector<double> fg, mg, cx, cv, st, ct;
    for (const auto& p : in.csv_paths) {
      const MetricsTable t = load_csv(p);
      if (t.empty()) continue;
      fg.push_back(t.back().grad_norm_w);
      double m = std::numeric_limits<double>::infinity();
      for (const auto& r : t) m = std::min(m, r.grad_norm_w);
      mg.push_back(m);
      cx.push_back(t.back().consensus_x);
      cv.push_back(t.back().consensus_v);
      st.push_back(samples_to_threshold(t, threshold));
      ct.push_back(samples_to_threshold(t, threshold, true));
    }
    if (fg.empty()) continue;
    out.push_back({in.config_hash, in.label, fg.size(), aggregate(fg), aggregate(mg), aggregate(cx), aggregate(cv),
                   aggregate(st), aggregate(ct)});
  }
  return out;
}

inline void write_summary(std::ostream& os, const SummaryTable& table) {
  os << "config_hash,label,runs,final_grad_median,final_grad_iqr,min_grad_median,min_grad_iqr,"
        "consensus_x_median,consensus_x_iqr,consensus_v_median,consensus_v_iqr,"
        "samples_to_threshold_median,samples_to_threshold_iqr,comms_to_threshold_median,comms_to_threshold_iqr\n";
  for (const auto& r : table) {
    os << r.config_hash << ',' << r.label << ',' << r.runs;
    for (const Aggregate* a : {&r.final_grad, &r.min_grad, &r.consensus_x, &r.consensus_v, &r.samples_to_threshold,
                               &r.comms_to_threshold})
      os << ',' << detail::fmt_double(a->median) << ',' << detail::fmt_double(a->iqr);
    os << '\n';
  }
}

inline SummaryTable emit_summary(const std::vector<SummaryInput>& inputs, double threshold,
                                 const std::filesystem::path& path) {
  SummaryTable table = summarize(inputs, threshold);
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  write_summary(f, table);
  if (!f) throw IoError("write failed for '" + path.string() + "'");
  return table;
}

inline std::string describe(const ExperimentConfig& c) {
  return std::string(to_string(c.algorithm)) + "/" + std::string(to_string(c.topology_kind)) + "/n=" +
         std::to_string(c.n);
}

inline std::filesystem::path run_csv_path(const ExperimentConfig& c, std::uint64_t seed) {
  return std::filesystem::path(c.output_dir) / config_hash(c) / ("seed_" + std::to_string(seed) + ".csv");
}

// ---------------------------------------------------------------------------
// Parallel execution across independent runs
// ---------------------------------------------------------------------------

// Worker count: DECOPT_THREADS when set to a positive integer, otherwise the
// hardware concurrency, never more than the number of jobs.
inline unsigned worker_count(std::size_t jobs) {
  unsigned w = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DECOPT_THREADS")) {
    if (auto v = detail::parse_int(env); v && *v > 0) w = static_cast<unsigned>(*v);
  }
  return static_cast<unsigned>(std::max<std::size_t>(1, std::min<std::size_t>(w, jobs)));
}

// Runs job(i) for i in [0, count). The first exception is rethrown after all
// workers finish.
inline void parallel_for(std::size_t count, const std::function<void(std::size_t)>& job) {
  const unsigned workers = worker_count(count);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto body = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(error_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    body();
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(body);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
}

struct SeedOutcome {
  std::uint64_t seed = 0;
  RunStatus status = RunStatus::ok;
  std::string abort_reason;
  std::filesystem::path csv;
};

// Runs every configured seed and writes one CSV per seed.
inline std::vector<SeedOutcome> run_all_seeds(const PreparedExperiment& ex) {
  std::vector<SeedOutcome> out(ex.config.seeds.size());
  parallel_for(out.size(), [&](std::size_t k) {
    const std::uint64_t seed = ex.config.seeds[k];
    RunResult r = run_experiment(ex, seed);
    const auto path = run_csv_path(ex.config, seed);
    emit_csv(r.table, path);
    out[k] = {seed, r.status, r.abort_reason, path};
  });
  return out;
}

struct SpeedupResult {
  SummaryTable summary;
  std::vector<std::vector<SeedOutcome>> outcomes;  // per entry of n_list
};

// Reruns the base config at each agent count with the per-agent batch held
// fixed, then writes
//   summary.csv          aggregates per n
//   speedup_curve.csv    median loss against samples per agent
//   deviation_scaling.csv  median deviation against nb at the initial state
inline SpeedupResult speedup_sweep(const ExperimentConfig& base, const std::vector<int>& n_list) {
  if (n_list.empty()) throw InvalidArgument("speedup_sweep: empty agent list");
  SpeedupResult res;
  std::vector<SummaryInput> inputs;
  const std::filesystem::path root(base.output_dir);
  std::ostringstream curve;
  curve << "n,t,samples_per_agent,median_f_value,median_grad_norm_w\n";
  for (int n : n_list) {
    ExperimentConfig c = base;
    c.n = n;
    const PreparedExperiment ex = prepare(c);
    auto outcomes = run_all_seeds(ex);
    SummaryInput in{config_hash(c), describe(c), {}};
    std::vector<MetricsTable> tables;
    for (const auto& o : outcomes) {
      in.csv_paths.push_back(o.csv);
      tables.push_back(load_csv(o.csv));
    }
    std::size_t rows = std::numeric_limits<std::size_t>::max();
    for (const auto& t : tables) rows = std::min(rows, t.size());
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<double> fv, gv;
      for (const auto& t : tables) {
        fv.push_back(t[r].f_value);
        gv.push_back(t[r].grad_norm_w);
      }
      const auto& rec = tables.front()[r];
      curve << n << ',' << rec.t << ',' << detail::fmt_double(static_cast<double>(rec.samples) / n) << ','
            << detail::fmt_double(median(fv)) << ',' << detail::fmt_double(median(gv)) << '\n';
    }
    inputs.push_back(std::move(in));
    res.outcomes.push_back(std::move(outcomes));
  }
  res.summary = emit_summary(inputs, base.threshold, root / "summary.csv");

  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  {
    std::ofstream f(root / "speedup_curve.csv", std::ios::binary);
    if (!f) throw IoError("cannot write speedup_curve.csv under '" + root.string() + "'");
    f << curve.str();
  }
  {
    ExperimentConfig c = base;
    c.algorithm = Algorithm::dnsgd_pd;
    c.K.reset();
    c.theorem_eps.reset();
    const PreparedExperiment ex = prepare(c);
    const auto study = deviation_scaling_study(ex.mix, ex.profile, ex.suite, ex.noise, ex.x0, ex.params.K,
                                               {1, 2, 4, 8, 16}, 50, base.seeds.front());
    std::ofstream f(root / "deviation_scaling.csv", std::ios::binary);
    if (!f) throw IoError("cannot write deviation_scaling.csv under '" + root.string() + "'");
    f << "nb,median_deviation\n";
    for (const auto& p : study.points) f << p.nb << ',' << detail::fmt_double(p.median_deviation) << '\n';
    f << "# slope," << detail::fmt_double(study.slope) << '\n';
  }
  return res;
}

}  // namespace decopt
