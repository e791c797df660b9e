#pragma once

#include <stdexcept>
#include <string>

namespace gpnn {

/// Base of every error thrown by the library. `category()` is a short
/// machine-readable tag used by the CLI when it reports a failure.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* category() const noexcept { return "error"; }
};

class ParseError : public Error {
 public:
  ParseError(const std::string& where, std::size_t line, const std::string& what)
      : Error(where + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }
  const char* category() const noexcept override { return "parse"; }

 private:
  std::size_t line_;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "integrity"; }
};

class DuplicateIdError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "duplicate-id"; }
};

class ValidationError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "validation"; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "config"; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "shape"; }
};

class NumericError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "numeric"; }
};

class StateError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "state"; }
};

}  // namespace gpnn
