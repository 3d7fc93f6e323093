#pragma once

#include <stdexcept>
#include <string>

namespace camlab {

/// Base for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file contents.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A spec, weight store or argument violates a structural invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Bad user configuration (unknown method, unresolvable layer alias, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Input data cannot support the requested computation (no positive slices, missing file).
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace camlab
