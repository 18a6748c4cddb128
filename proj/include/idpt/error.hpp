#pragma once

#include <stdexcept>
#include <string>

namespace idpt {

// Shape/dimension violations (matmul mismatch, empty input, bad reshape).
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric violations (NaN inputs, malformed probability vectors).
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Out-of-range indices (gold class, initiative index).
struct IndexError : std::runtime_error {
  explicit IndexError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed corpus files or examples (schema violations, missing labels).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid model/training configuration (layer mismatch, unfrozen decoder).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace idpt
