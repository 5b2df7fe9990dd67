#pragma once

#include <stdexcept>
#include <string>

namespace kinfuse {

/// Malformed input files, bad labels, inconsistent layouts.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parse failure tied to a line of an input file.
class ParseError : public DataError {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : DataError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Incompatible matrix or vector dimensions.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite loss, update or gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace kinfuse
