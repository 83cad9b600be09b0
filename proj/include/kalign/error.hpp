#pragma once

#include <stdexcept>
#include <string>

namespace kalign {

/// Base of every error the toolkit throws. The category decides the CLI
/// exit code (2 config, 3 data, 4 numerical).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Malformed KEMB / KADP files. Each failure mode is its own kind so that
/// callers can tell a truncated download from silent corruption.
class FormatError : public DataError {
 public:
  enum class Kind { kBadMagic, kBadVersion, kBadDtype, kCrcMismatch, kTruncated, kIo };

  FormatError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace kalign
