#pragma once

#include <stdexcept>
#include <string>

namespace bevfuse {

/// Base of all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition (non-scalar loss, stride mismatch, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid model/pipeline configuration, detected at build time.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An op produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace bevfuse
