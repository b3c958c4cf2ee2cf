#pragma once

#include <stdexcept>
#include <string>

namespace partseg {

/// Base class for every error raised by the library. The CLI maps the
/// concrete subclasses to process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid run or generator configuration (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument passed to an operation (shape mismatch, out-of-range id).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Missing key in a keyed container (shared token bank, registries).
class LookupError : public Error {
 public:
  using Error::Error;
};

/// Dataset problems: unreadable files, manifest inconsistencies (exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

class SamplingError : public DataError {
 public:
  using DataError::DataError;
};

/// Non-finite loss or parameters during training (exit code 4).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition (e.g. reading an absent prototype).
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace partseg
