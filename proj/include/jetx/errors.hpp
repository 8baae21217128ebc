#pragma once

#include <stdexcept>
#include <string>

namespace jetx {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input files (archives, JSON, CSV, keyword lists).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Tensor or series shapes/orders that do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Numeric domain violations (log of a non-positive number, zero-norm cosine, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Requests the library refuses to run: budget caps, unsupported configurations,
/// out-of-range indices.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace jetx
