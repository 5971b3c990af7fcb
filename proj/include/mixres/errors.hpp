#pragma once

#include <stdexcept>
#include <string>

namespace mixres {

// Operand dimensions disagree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A scalar/config parameter is outside its valid domain.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An operation was invoked in the wrong lifecycle state (e.g. backward
// without a recorded graph, optimizer step without gradients).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN/Inf encountered where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Reading or writing a file failed.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mixres
