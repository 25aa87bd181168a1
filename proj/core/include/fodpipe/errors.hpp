#pragma once

#include <stdexcept>
#include <string>

namespace fodpipe {

// Bad argument or precondition violation supplied by the caller.
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A requested size exceeds a configured memory cap.
struct CapacityError : std::length_error {
  using std::length_error::length_error;
};

// A linear system is rank deficient or too badly conditioned to solve.
struct ConditioningError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed, missing or inconsistent input data (files, masks, tensors).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fodpipe
