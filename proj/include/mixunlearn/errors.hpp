#pragma once

#include <stdexcept>
#include <string>

namespace mixunlearn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class DimensionError : public Error {
public:
  using Error::Error;
};

/// Caller supplied an empty, out-of-range or otherwise unusable argument.
class InputError : public Error {
public:
  using Error::Error;
};

/// A precondition on how an API is called was violated (e.g. backward from a
/// non-scalar root).
class ContractError : public Error {
public:
  using Error::Error;
};

/// Configuration is inconsistent (unknown key, missing field, bad value).
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Malformed file contents.
class ParseError : public Error {
public:
  using Error::Error;
};

/// A loss or parameter became NaN/Inf during optimization.
class NumericError : public Error {
public:
  using Error::Error;
};

} // namespace mixunlearn
