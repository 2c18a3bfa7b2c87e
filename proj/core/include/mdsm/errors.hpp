#pragma once

#include <stdexcept>
#include <string>

namespace mdsm {

/// Invalid configuration value (ranges, shapes implied by config, missing keys).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Tensor shapes that do not line up between two operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Well-shaped input whose content cannot be processed (e.g. an all-padding instruction).
class InvalidInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The synthetic generator could not produce a valid scene or sample.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyResultError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training diverged or its prerequisites are missing.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mdsm
