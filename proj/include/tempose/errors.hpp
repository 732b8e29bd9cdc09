#pragma once

#include <stdexcept>
#include <string>

namespace tempose {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
  using Error::Error;
};
class TapeError : public Error {
  using Error::Error;
};
class DegenerateRotationError : public Error {
  using Error::Error;
};
class InvalidDepthError : public Error {
  using Error::Error;
};
class EmptyInputError : public Error {
  using Error::Error;
};
class InsufficientContextError : public Error {
  using Error::Error;
};
class ContextOverflowError : public Error {
  using Error::Error;
};
class ConfigError : public Error {
  using Error::Error;
};
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};
class VersionError : public Error {
  using Error::Error;
};
class ValidationError : public Error {
  using Error::Error;
};
class MissingFeatureError : public Error {
  using Error::Error;
};
class IoError : public Error {
  using Error::Error;
};
class NonFiniteError : public Error {
  using Error::Error;
};

}  // namespace tempose
