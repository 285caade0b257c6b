#pragma once

#include <stdexcept>
#include <string>

namespace hadapt {

// Base of every error the library throws. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf detected, or an iterative method that failed to converge.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public NumericError {
 public:
  ConvergenceError(const std::string& what, double previous, double last)
      : NumericError(what), previous_(previous), last_(last) {}

  double previous() const { return previous_; }
  double last() const { return last_; }

 private:
  double previous_;
  double last_;
};

// Invalid configuration, bad data, malformed files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Misuse of an API in a way the caller could have avoided (double injection, tape reuse).
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace hadapt
