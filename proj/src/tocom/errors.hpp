#pragma once

#include <stdexcept>
#include <string>

namespace tocom {

// Base of every error raised by the library. The C API maps the subclasses
// onto status codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Precondition or invariant violated (bad argument, non-finite value, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed artifact or dataset file.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace tocom
