#pragma once

#include <stdexcept>
#include <string>

namespace ule {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible for the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An operation produced NaN or Inf.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the differentiation engine (non-scalar output, detached output).
class GradError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument outside of shape checks (bad probability, bad palette, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Training diverged or produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ule
