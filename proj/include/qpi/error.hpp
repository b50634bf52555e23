#pragma once

#include <stdexcept>
#include <string>

namespace qpi {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or layer extents do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Bad configuration value or combination (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or missing input data (CLI exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

// Operation invoked in the wrong order, e.g. backward before forward.
class StateError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of the operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Non-finite values encountered during a numeric update.
class NumericError : public Error {
 public:
  using Error::Error;
};

// The model lacks a structural feature the method needs (e.g. a spatial conv map).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace qpi
