#pragma once

#include <stdexcept>
#include <string>

namespace eqlm {

// Invalid configuration or shapes that cannot work together.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse: calling things in the wrong order or with mismatched sizes.
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

// Malformed files (IDX, images, annotations, checkpoints).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf showed up where a finite value is required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace eqlm
