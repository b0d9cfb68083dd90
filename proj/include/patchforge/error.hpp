#pragma once

#include <stdexcept>
#include <string>

namespace patchforge {

/// Root of every exception the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidBoxError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration value or inconsistent settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an API contract (frozen model passed to train, non-scalar loss, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf showed up where a finite value was required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class LayoutError : public Error {
 public:
  using Error::Error;
};

}  // namespace patchforge
