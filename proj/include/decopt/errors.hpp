// Copyright (c) 2026 The decopt authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace decopt {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition or argument-range failure.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// An iterative method ran out of iterations.
class NonConvergence : public Error {
 public:
  using Error::Error;
};

// A numerically degenerate quantity (underflowed diagonal, non-mixing matrix).
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite entry found in an iterate matrix.
class DivergenceError : public Error {
 public:
  DivergenceError(std::int64_t step, std::string matrix)
      : Error("non-finite value in " + matrix + " at step " + std::to_string(step)),
        step_(step),
        matrix_(std::move(matrix)) {}

  std::int64_t step() const { return step_; }
  const std::string& matrix() const { return matrix_; }

 private:
  std::int64_t step_;
  std::string matrix_;
};

// Carries every violation found while validating a config, not only the first.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> violations)
      : Error(join(violations)), violations_(std::move(violations)) {}

  const std::vector<std::string>& violations() const { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out = "invalid config:";
    for (const auto& s : v) out += "\n  " + s;
    return out;
  }
  std::vector<std::string> violations_;
};

class MonitorViolation : public Error {
 public:
  MonitorViolation(std::int64_t step, std::vector<std::string> names)
      : Error(describe(step, names)), step_(step), names_(std::move(names)) {}

  std::int64_t step() const { return step_; }
  const std::vector<std::string>& names() const { return names_; }

 private:
  static std::string describe(std::int64_t step, const std::vector<std::string>& names) {
    std::string out = "monitor violation at step " + std::to_string(step) + ":";
    for (const auto& n : names) out += " " + n;
    return out;
  }
  std::int64_t step_;
  std::vector<std::string> names_;
};

}  // namespace decopt
