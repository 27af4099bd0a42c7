#pragma once

#include <stdexcept>
#include <string>

namespace bingo {

// Base class for all library errors. The CLI maps the subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed inputs: shape mismatches, violated preconditions, bad file contents.
class InvariantError : public Error {
 public:
  using Error::Error;
};

// Numeric failure mid-computation: non-finite values, degenerate rows in loss paths.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace bingo
