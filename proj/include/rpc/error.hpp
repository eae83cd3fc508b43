#pragma once

#include <stdexcept>
#include <string>

namespace rpc {

// Base of every error the library raises. The CLI maps the subclasses onto
// process exit codes (see tools/rpc_gcd.cpp).
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
  public:
    using Error::Error;
};

class ParameterError : public Error {
  public:
    using Error::Error;
};

class ContractError : public Error {
  public:
    using Error::Error;
};

/// A forward result contained NaN or Inf, or a loss component went non-finite.
class NumericalError : public Error {
  public:
    using Error::Error;
};

class ParseError : public Error {
  public:
    using Error::Error;
};

class ConfigError : public Error {
  public:
    using Error::Error;
};

class IoError : public Error {
  public:
    using Error::Error;
};

}  // namespace rpc
