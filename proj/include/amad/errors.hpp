#pragma once

#include <stdexcept>
#include <string>

namespace amad {

/// Incompatible tensor or grid extents.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or out-of-range parameter.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Operation invoked in a state that does not permit it.
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File could not be read or written; the message names the path.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace amad
