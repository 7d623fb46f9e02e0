#pragma once

#include <stdexcept>
#include <string>

namespace qaid {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller passed arguments that violate an operation's preconditions.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Input files or in-memory data are malformed or inconsistent.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A computation produced a non-finite or otherwise unusable value.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or index file that cannot be decoded.
class CorruptFileError : public DataError {
 public:
  using DataError::DataError;
};

/// Stored tensor shapes disagree with the expected configuration.
class ShapeMismatchError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace qaid
