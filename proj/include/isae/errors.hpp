#pragma once

#include <stdexcept>
#include <string>

namespace isae {

// Base for everything we throw. The CLI maps subclasses to exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape or wiring mismatch. Always a bug or a bad config, never data.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid configuration file, flag, or argument value.
struct ConfigError : Error {
  using Error::Error;
};

// File missing, unreadable, truncated, or with a bad magic/version.
struct IoError : Error {
  using Error::Error;
};

// Training produced a NaN/Inf loss or gradient.
struct DivergedError : Error {
  using Error::Error;
};

// The mixing matrix became numerically singular.
struct IllConditionedError : DivergedError {
  using DivergedError::DivergedError;
};

}  // namespace isae
