#pragma once

#include <stdexcept>
#include <string>

namespace facecom {

// Base of all library errors. The CLI maps the subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad invocation or configuration (exit code 1).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Unreadable, malformed or inconsistent input data (exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, shape mismatches and other numeric failures (exit code 3).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace facecom
