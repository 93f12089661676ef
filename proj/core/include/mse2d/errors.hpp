#pragma once

#include <stdexcept>
#include <string>

namespace mse2d {

// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Bad user-supplied input (empty text, out-of-range index, zero-norm vector).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid configuration (encoder geometry, training flags, dim sets).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed files: JSON-lines parse failures, corrupted checkpoints.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Misuse of the gradient tape (non-scalar loss, loss recorded elsewhere).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace mse2d
