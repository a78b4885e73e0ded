#pragma once

#include <stdexcept>
#include <string>

namespace hted {

/// Base of every error raised by this project.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes, slots or layer indices that do not fit together.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, failed factorizations, diverging optimizers.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Bad user-supplied data: token ids, parameters, configs.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A mathematical precondition such as a non-zero direction was violated.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated files.
class FormatError : public Error {
 public:
  using Error::Error;
};

class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// A run finished but missed a required quality threshold.
class ThresholdError : public Error {
 public:
  using Error::Error;
};

}  // namespace hted
