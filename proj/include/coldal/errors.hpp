#pragma once

#include <stdexcept>
#include <string>

namespace coldal {

// File/stream format problems (CAL3D grids, checkpoints, pool state).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MagicError : FormatError {
  using FormatError::FormatError;
};
struct VersionError : FormatError {
  using FormatError::FormatError;
};
struct TruncationError : FormatError {
  using FormatError::FormatError;
};

// Config parse or validation failure. CLI exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite loss/gradient/metric during a run. CLI exit code 3.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Illegal pool-state transition (e.g. annotating an id twice).
struct InvalidTransitionError : std::logic_error {
  using std::logic_error::logic_error;
};

// Warm start across incompatible architectures.
struct IncompatibleParamsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace coldal
