#pragma once

#include <stdexcept>
#include <string>

namespace gradleak {

// Malformed configuration, missing files, inconsistent shapes between inputs.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// SVD non-convergence, non-finite objectives, vanished gradients.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gradleak
