#pragma once

#include <stdexcept>
#include <string>

namespace gemgate {

// Shape/size disagreement between arguments (empty input, length mismatch).
struct DimensionError : std::invalid_argument {
  explicit DimensionError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Argument outside the mathematical domain of an operation (zero norm,
// probability outside (0,1) after clamping).
struct DomainError : std::invalid_argument {
  explicit DomainError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Invalid configuration value (non-positive weight, zero temperature).
struct ConfigError : std::invalid_argument {
  explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Numeric breakdown at runtime: singular covariance, non-finite iterate,
// diverging loss. Carries enough context to locate the failure.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace gemgate
