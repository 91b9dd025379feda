#pragma once

#include <stdexcept>
#include <string>

namespace capsule {

// Each category maps onto one CLI exit code (see tools/capsule.cpp).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace capsule
