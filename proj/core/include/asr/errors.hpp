#pragma once

#include <stdexcept>

namespace asr {

/// Malformed configuration: unknown keys, out-of-range values, bad CLI input.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Unreadable or corrupt files: bad magic, truncation, version mismatch.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Numerical failure: non-finite values, ill-posed decompositions, divergence.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace asr
