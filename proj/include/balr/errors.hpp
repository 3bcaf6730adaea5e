#pragma once

#include <stdexcept>
#include <string>

namespace balr {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape disagreement between operands. `axis()` names the offending axis
/// (-1 when the rank itself is wrong).
class DimensionError : public Error {
 public:
  DimensionError(const std::string& what, int axis)
      : Error(what + " (axis " + std::to_string(axis) + ")"), axis_(axis) {}
  int axis() const noexcept { return axis_; }

 private:
  int axis_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf observed at an op boundary, or a degenerate denominator.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ScheduleError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Training loss became non-finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Malformed checkpoint or config file.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, int line = 0, int column = 0)
      : Error(line > 0 ? what + " at line " + std::to_string(line) + ", column " + std::to_string(column) : what),
        line_(line),
        column_(column) {}
  int line() const noexcept { return line_; }
  int column() const noexcept { return column_; }

 private:
  int line_;
  int column_;
};

}  // namespace balr
