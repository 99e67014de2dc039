#pragma once

#include <stdexcept>
#include <string>

namespace rdetect {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad argument or shape mismatch at an API boundary.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Trace / checkpoint / config file could not be decoded.
class ParseError : public Error {
 public:
  enum class Kind { Empty, MalformedHeader, NonFinite, Truncated, BadMagic, VersionMismatch, Io };

  ParseError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Training produced a non-finite loss or gradient.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

/// Stateful object used before its explicit initialization.
class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace rdetect
