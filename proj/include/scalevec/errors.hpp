#pragma once

#include <stdexcept>
#include <string>

namespace scalevec {

// Bad shapes, bad flag values, inconsistent model configuration.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf escaped an operation, or training diverged.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input files (IDX, fold, checkpoint).
struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse (e.g. backward() on a non-scalar loss).
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace scalevec
