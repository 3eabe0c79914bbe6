#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddspme {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  DimensionMismatch(std::size_t expected, std::size_t got, const std::string& where)
      : Error(where + ": dimension mismatch (expected " + std::to_string(expected) +
              ", got " + std::to_string(got) + ")") {}
};

class QuadratureError : public Error {
 public:
  QuadratureError(const std::string& msg, double estimate)
      : Error(msg), error_estimate(estimate) {}
  double error_estimate;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& msg, std::size_t iters, double last)
      : Error(msg), iterations(iters), last_value(last) {}
  std::size_t iterations;
  double last_value;
};

// Non-finite state or a failed inner solve during time stepping.
class NumericalAbort : public Error {
 public:
  NumericalAbort(const std::string& msg, std::size_t step_index)
      : Error(msg + " (step " + std::to_string(step_index) + ")"), step(step_index) {}
  std::size_t step;
  std::ptrdiff_t window = -1;
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw InvalidArgument(msg);
}

inline void require_dim(std::size_t expected, std::size_t got, const char* where) {
  if (expected != got) throw DimensionMismatch(expected, got, where);
}

}  // namespace ddspme
