#pragma once

#include <stdexcept>
#include <string>

namespace hyperloop {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested op.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Operation is invalid in the current object state (e.g. a consumed graph).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent or unknown configuration. The CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad user-provided data such as out-of-range token ids.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values detected during training or evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace hyperloop
