#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tokenunlearn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sequence longer than the model context, or otherwise mis-sized input.
class LengthError : public Error {
 public:
  using Error::Error;
};

/// Non-finite parameter, loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Position, layer or token index outside its valid range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// A trace or cached value no longer matches the state it was built from.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

/// Missing or malformed knowledge annotations on a sequence.
class AnnotationError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameter or configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File-level I/O failure (open, read, write).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed record in a line-oriented file. `line()` is 1-based.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Training did not reach its goal within budget, or diverged.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace tokenunlearn
