#pragma once

#include <stdexcept>
#include <string>

namespace pmatte {

// Shape or extent disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A value outside the accepted domain of an operation.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Operation invoked on an object in the wrong state (e.g. consumed graph).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Request exceeds what an encoding can represent.
class CapacityError : public std::length_error {
 public:
  using std::length_error::length_error;
};

// NaN or Inf produced where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Scene or prompt generation could not satisfy its constraints.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or unreadable files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pmatte
