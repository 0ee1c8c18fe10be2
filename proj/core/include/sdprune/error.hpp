#pragma once

#include <stdexcept>
#include <string>

namespace sdprune {

// Base class for every error raised by the library. The subclasses map onto
// the CLI exit codes (see tools/sdprune_main.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Bad user-supplied value (labels out of range, empty datasets, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents. Messages name the byte offset or row.
class FormatError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by a computation.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace sdprune
