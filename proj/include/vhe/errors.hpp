#pragma once

#include <stdexcept>
#include <string>

namespace vhe {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad tensor shapes or graph wiring.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf detected; computation must abort rather than propagate.
struct NumericError : Error {
  using Error::Error;
};

// Malformed or inconsistent input data files.
struct DataError : Error {
  using Error::Error;
};

// Invalid configuration (unknown key, bad value, incompatible dims).
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace vhe
