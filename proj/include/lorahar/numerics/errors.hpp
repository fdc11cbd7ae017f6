#pragma once

#include <stdexcept>
#include <string>

namespace lorahar {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A configuration value violates its documented range.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Stored or supplied data is malformed (corrupt codes, bad files, labels out of range).
class DataError : public Error {
 public:
  using Error::Error;
};

/// An experiment protocol precondition failed (e.g. LODO with fewer than two domains).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared where the computation requires finite numbers.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the gradient tape (double backward, non-scalar loss).
class TapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace lorahar
