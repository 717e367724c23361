#pragma once

#include <stdexcept>
#include <string>

namespace compscale {

// Base for every library error. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or group sizes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or consumed by a numeric kernel.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed config, spec string, record or file.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A fit could not be carried out (too few records, all starts failed, ...).
class FitError : public Error {
 public:
  using Error::Error;
};

}  // namespace compscale
