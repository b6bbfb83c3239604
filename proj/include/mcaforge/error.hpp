#pragma once

#include <stdexcept>
#include <string>

namespace mcaforge {

// Base class for all domain errors raised by the library. The CLI maps
// these to exit code 1; anything else is a bug.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor dimension mismatch (matmul inner dims, concat trailing dims, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration: bad model dims, unknown task name, bad mixture.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A branch-interaction policy cannot be applied to the given states.
class PolicyError : public Error {
 public:
  using Error::Error;
};

// Schedule/config text could not be parsed; carries a 1-based line number
// (0 when the error is not tied to a specific line).
class ParseError : public Error {
 public:
  ParseError(int line, const std::string& message)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + message : message),
        line_(line) {}
  int line() const { return line_; }

 private:
  int line_ = 0;
};

// File or serialization failure (.mcat, manifests, checkpoints).
class IoError : public Error {
 public:
  using Error::Error;
};

// A pipeline backend failed after the configured retries.
class BackendError : public Error {
 public:
  using Error::Error;
};

}  // namespace mcaforge
