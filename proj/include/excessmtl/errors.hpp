#pragma once

#include <stdexcept>
#include <string>

namespace excessmtl {

/// Operand shapes or lengths do not agree.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A named parameter view does not exist.
struct LookupError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// A supervision target is invalid for its loss kind.
struct TargetError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Degenerate input such as an empty batch.
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A numerical precondition failed (non-PD matrix, NaN gradient, ...).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite gradient.
struct DivergenceError : NumericError {
  using NumericError::NumericError;
};

/// Invalid or inconsistent configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Malformed file contents.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace excessmtl
