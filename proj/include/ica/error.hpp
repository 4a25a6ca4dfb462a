#pragma once

#include <stdexcept>
#include <string>

namespace ica {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input that violates a documented precondition (bad config, shape mismatch, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents; carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Sequence does not fit the model context.
class LengthError : public Error {
 public:
  using Error::Error;
};

/// A training run stopped on a non-finite loss.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, long step)
      : Error("step " + std::to_string(step) + ": " + what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

/// A deliberately expensive operation was asked to exceed its budget.
class BudgetExceeded : public Error {
 public:
  using Error::Error;
};

}  // namespace ica
