#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace mdt {

// Error taxonomy; the CLI maps these onto exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline int64_t round_half_up(double x) {
  return static_cast<int64_t>(std::floor(x + 0.5));
}

}  // namespace mdt
