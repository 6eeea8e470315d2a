#pragma once

#include <stdexcept>
#include <string>

namespace brainseg {

/// Bad input: malformed boxes, mismatched shapes, unknown label colors,
/// inconsistent manifests. The CLI maps this to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Inconsistent model or run configuration (also exit code 1).
class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Failure while running an otherwise valid request, e.g. a diverging
/// loss or an unreadable file. The CLI maps this to exit code 2.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace brainseg
