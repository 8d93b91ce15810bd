#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ermc {

// Base class for every failure raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Malformed model or property text. Line/column are 1-based; 0 means unknown.
class ParseError : public Error {
public:
  ParseError(const std::string& what, std::size_t line, std::size_t column)
      : Error(format(what, line, column)), line_(line), column_(column) {}

  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

private:
  static std::string format(const std::string& what, std::size_t line, std::size_t column) {
    if (line == 0) return what;
    return "line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + what;
  }

  std::size_t line_;
  std::size_t column_;
};

// A model that violates a structural requirement of the requested operation.
class ModelError : public Error {
public:
  using Error::Error;
};

// Caller passed arguments outside an operation's domain.
class PreconditionError : public Error {
public:
  using Error::Error;
};

// Singular systems, non-convergent quadrature, NaN in an objective.
class NumericError : public Error {
public:
  using Error::Error;
};

}  // namespace ermc
