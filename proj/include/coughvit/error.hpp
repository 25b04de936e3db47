#pragma once

#include <stdexcept>
#include <string>

namespace coughvit {

// Base of every error the library raises. Callers that only care about
// "something went wrong" catch this; the CLI maps the two subclasses onto
// distinct exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input: malformed files, violated preconditions, inconsistent configs.
class InputError : public Error {
 public:
  using Error::Error;
};

// Numerical failure inside a computation (non-finite values, degenerate
// statistics that cannot be recovered from).
class NumericError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InputError(what);
}

}  // namespace coughvit
