#pragma once

#include <stdexcept>
#include <string>

namespace cdt {

// Base of every error raised by the library. Callers that only want to
// report a failure can catch this; the subclasses exist so the CLI can map
// failures onto distinct exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not conform for the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf values, or a softmax row with nothing left to normalize.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed weight containers, token files, circuit files.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Bad runtime inputs: token ids out of range, ragged datasets, bad nodes.
class InputError : public Error {
 public:
  using Error::Error;
};

// A node that does not exist in the model it is applied to.
class NodeRangeError : public InputError {
 public:
  using InputError::InputError;
};

// A decomposition target that is not downstream of its source.
class OrderingError : public Error {
 public:
  using Error::Error;
};

}  // namespace cdt
