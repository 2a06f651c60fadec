#pragma once

#include <stdexcept>
#include <string>

namespace salmo {

// Bad call arguments: dimension mismatches, out-of-range indices, empty inputs.
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Structurally invalid model specification (non-positive variance, non-SPD
// lengthscale matrix, wrong W shape, ...).
struct SpecError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Numerical breakdown that survived the mitigation policy (jitter exhausted,
// non-finite determinant, ...).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Inference failed to produce a usable result (e.g. every HMC proposal
// diverged).
struct InferenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed external data; message names the offending row and column.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid run configuration; message names the offending field.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace salmo
