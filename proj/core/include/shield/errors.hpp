#pragma once

#include <stdexcept>
#include <string>

namespace shield {

// Bad tensor shapes passed to an op. Message names the op and both shapes.
class ShapeError : public std::runtime_error {
public:
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid configuration or argument values (file formats, CLI options, ranges).
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// File could not be read or written.
class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values where finite ones are required (losses, gradients).
class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Raised by a query-counted victim when the caller exceeds its budget.
class BudgetExhausted : public std::runtime_error {
public:
  explicit BudgetExhausted(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace shield
