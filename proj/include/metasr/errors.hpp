#pragma once

#include <stdexcept>
#include <string>

namespace metasr {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or name mismatch between matrices, parameter sets or layers.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A ForwardCache was used with a layer or gradient it did not come from.
class CacheError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Target sequence cannot be emitted in the available number of frames.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

/// Input data violates a documented invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Oracle refused an instance that is too large to enumerate.
class GuardError : public Error {
 public:
  using Error::Error;
};

/// Unknown language or parameter name.
class LookupError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Invalid user configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace metasr
