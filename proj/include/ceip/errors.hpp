#pragma once

#include <stdexcept>
#include <string>

namespace ceip {

// Error taxonomy maps onto CLI exit codes: config=2, numeric=3, io=4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : ConfigError {
  using ConfigError::ConfigError;
};

struct UsageError : ConfigError {
  using ConfigError::ConfigError;
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg, int layer = -1)
      : std::runtime_error(msg), layer_index(layer) {}
  int layer_index;  // offending layer when known, else -1
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent dataset contents (bad input file).
struct DataError : IoError {
  using IoError::IoError;
};

}  // namespace ceip
