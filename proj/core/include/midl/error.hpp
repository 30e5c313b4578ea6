#pragma once

#include <stdexcept>

namespace midl {

// Shape disagreement between tensors (reported with both shapes).
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid user-facing configuration (k out of range, bad dropout rate, ...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed bytes while reading a file format; message names the byte offset.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Semantically invalid data (label out of range, count mismatch between files).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse: backward on a non-scalar, reusing a spent tape, degenerate
// inputs to a checker, and similar programming-contract violations.
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace midl
