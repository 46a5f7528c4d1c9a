// Copyright (c) 2026 The decopt authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end.
//   decopt run   --config <path> [--seed N] [--out <dir>] [--strict-monitors]
//   decopt sweep --config <path> --n 1,2,4,8
//   decopt check --config <path>
// Exit codes: 0 success, 1 other failure, 2 monitor violation, 3 divergence,
// 4 config error.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "decopt/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitMonitor = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitConfig = 4;

decopt::ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw decopt::ConfigError({"cannot open config '" + path + "'"});
  std::stringstream ss;
  ss << f.rdbuf();
  return decopt::parse_config(ss.str());
}

int exit_code_for(const std::vector<decopt::SeedOutcome>& outcomes) {
  int code = kExitOk;
  for (const auto& o : outcomes) {
    if (o.status == decopt::RunStatus::diverged) return kExitDiverged;
    if (o.status == decopt::RunStatus::monitor_violation) code = kExitMonitor;
  }
  return code;
}

void report(const std::vector<decopt::SeedOutcome>& outcomes) {
  for (const auto& o : outcomes) {
    std::cout << "seed " << o.seed << ": " << decopt::to_string(o.status) << "  " << o.csv.string() << '\n';
    if (!o.abort_reason.empty()) std::cerr << "  " << o.abort_reason << '\n';
  }
}

int cmd_run(const std::string& path, const std::vector<std::uint64_t>& seeds, const std::string& out, bool strict) {
  auto cfg = load_config(path);
  if (!seeds.empty()) cfg.seeds = seeds;
  if (!out.empty()) cfg.output_dir = out;
  if (strict) {
    cfg.strict = true;
    cfg.monitors = true;
  }
  const auto ex = decopt::prepare(cfg);
  std::cout << "params: eta=" << ex.params.eta << " b=" << ex.params.b << " K=" << ex.params.K
            << " K_hat=" << ex.params.K_hat << " T=" << ex.params.T << '\n';
  const auto outcomes = decopt::run_all_seeds(ex);
  report(outcomes);
  decopt::SummaryInput in{decopt::config_hash(cfg), decopt::describe(cfg), {}};
  for (const auto& o : outcomes) in.csv_paths.push_back(o.csv);
  decopt::emit_summary({in}, cfg.threshold, std::filesystem::path(cfg.output_dir) / "summary.csv");
  return exit_code_for(outcomes);
}

int cmd_sweep(const std::string& path, const std::string& n_list) {
  const auto cfg = load_config(path);
  std::vector<int> ns;
  std::stringstream ss(n_list);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const int n = std::stoi(tok, &used);
      if (used != tok.size() || n < 1) throw std::invalid_argument(tok);
      ns.push_back(n);
    } catch (const std::exception&) {
      throw decopt::ConfigError({"--n: malformed agent count '" + tok + "'"});
    }
  }
  const auto res = decopt::speedup_sweep(cfg, ns);
  int code = kExitOk;
  for (const auto& o : res.outcomes) {
    report(o);
    const int c = exit_code_for(o);
    if (c == kExitDiverged || (c == kExitMonitor && code == kExitOk)) code = c;
  }
  for (const auto& row : res.summary) {
    std::cout << row.label << ": samples_to_threshold median " << row.samples_to_threshold.median
              << ", final grad median " << row.final_grad.median << '\n';
  }
  return code;
}

// Invariant checks that do not need a run: matrix identities and bounds, and
// gradient and smoothness checks on the objective.
int cmd_check(const std::string& path) {
  const auto cfg = load_config(path);
  const auto ex = decopt::prepare(cfg);
  std::vector<std::string> failures;

  const auto rep = decopt::check_matrix_invariants(ex.mix, ex.profile);
  std::cout << "beta=" << ex.profile.beta << " kappa=" << ex.profile.kappa
            << " K_min=" << decopt::min_mixing_steps(ex.profile) << '\n';
  for (const auto& f : rep.failures) failures.push_back("matrix:" + f);

  decopt::Rng rng(decopt::derive_seed(cfg.objective_seed, 0xC4EC));
  const int d = ex.suite.d();
  auto random_point = [&] {
    decopt::Vector x(d);
    for (int k = 0; k < d; ++k) x(k) = rng.normal();
    return x;
  };
  const double L = ex.suite.smoothness_constant();
  bool grad_ok = true, smooth_ok = true;
  for (int trial = 0; trial < 20; ++trial) {
    const int i = trial % ex.suite.n();
    const decopt::Vector x = random_point();
    const decopt::Vector g = ex.suite.local_grad(i, x);
    decopt::Vector fd(d);
    const double h = 1e-6;
    for (int k = 0; k < d; ++k) {
      decopt::Vector xp = x, xm = x;
      xp(k) += h;
      xm(k) -= h;
      fd(k) = (ex.suite.local_value(i, xp) - ex.suite.local_value(i, xm)) / (2 * h);
    }
    if ((fd - g).norm() > 1e-5 * std::max(1.0, g.norm())) grad_ok = false;
    const decopt::Vector y = random_point();
    if ((g - ex.suite.local_grad(i, y)).norm() > L * (x - y).norm() * (1 + 1e-12)) smooth_ok = false;
  }
  if (!grad_ok) failures.push_back("oracle:gradient_finite_difference");
  if (!smooth_ok) failures.push_back("oracle:smoothness_witness");

  for (const auto& f : failures) std::cout << "FAIL " << f << '\n';
  if (failures.empty()) std::cout << "all invariants hold\n";
  return failures.empty() ? kExitOk : kExitMonitor;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decentralized normalized SGD simulator"};
  app.require_subcommand(1);

  std::string config, out, n_list;
  std::vector<std::uint64_t> seeds;
  bool strict = false;

  auto* run = app.add_subcommand("run", "Run an experiment for each configured seed");
  run->add_option("--config", config, "Config file")->required();
  run->add_option("--seed", seeds, "Override the seed list");
  run->add_option("--out", out, "Override output.dir");
  run->add_flag("--strict-monitors", strict, "Abort a run at its first monitor violation");

  auto* sweep = app.add_subcommand("sweep", "Speedup sweep over agent counts");
  sweep->add_option("--config", config, "Config file")->required();
  sweep->add_option("--n", n_list, "Comma-separated agent counts")->required();

  auto* check = app.add_subcommand("check", "Run the invariant suite only");
  check->add_option("--config", config, "Config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config, seeds, out, strict);
    if (*sweep) return cmd_sweep(config, n_list);
    if (*check) return cmd_check(config);
  } catch (const decopt::ConfigError& e) {
    std::cerr << e.what() << '\n';
    return kExitConfig;
  } catch (const decopt::DivergenceError& e) {
    std::cerr << e.what() << '\n';
    return kExitDiverged;
  } catch (const decopt::MonitorViolation& e) {
    std::cerr << e.what() << '\n';
    return kExitMonitor;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitOther;
  }
  return kExitOther;
}
