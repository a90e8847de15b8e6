#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cprobe {

// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values (k out of range, heads not dividing dim, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Index outside its valid range (class targets, token ids).
class IndexError : public Error {
 public:
  using Error::Error;
};

// Sequence longer than the model context.
class LengthError : public Error {
 public:
  using Error::Error;
};

// Malformed or empty input data.
class InputError : public Error {
 public:
  using Error::Error;
};

// A metric is undefined for the given input (e.g. AP with no positives).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during optimization.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Corrupt or incompatible binary file. `offset` is the byte position at
// which the problem was detected.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// Record-level validation failure in a line-oriented input file.
class ValidationError : public Error {
 public:
  ValidationError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace cprobe
