#pragma once

#include <stdexcept>
#include <string>

namespace datasim {

// Bad input: malformed records, violated preconditions, inconsistent config.
// The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failure while computing on otherwise valid input (I/O, numerics).
// The CLI maps this to exit code 2.
class ComputeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace datasim
