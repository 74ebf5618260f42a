#pragma once

#include <stdexcept>
#include <string>

namespace kd {

// Error taxonomy shared by the whole library. The CLI maps these onto
// process exit codes, so keep the hierarchy flat and specific.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor/layer dimension mismatch (wrong channel count, bad weight shape...).
struct ShapeError : Error {
  using Error::Error;
};

// Structurally valid inputs that violate a configured constraint
// (non-positive output dims, pooling window larger than the input, bad
// hyperparameters, empty datasets).
struct ConfigError : Error {
  using Error::Error;
};

// Values outside a mathematical domain (temperature <= 0, label out of range).
struct DomainError : Error {
  using Error::Error;
};

// API used in the wrong order (backward without a recorded forward).
struct StateError : Error {
  using Error::Error;
};

// Dataset/file content problems (undecodable image, missing class folders).
struct DataError : Error {
  using Error::Error;
};

// Checkpoint deserialization problems (bad magic, version, truncation,
// shape conflicts).
struct LoadError : Error {
  using Error::Error;
};

// Filesystem write failures.
struct IoError : Error {
  using Error::Error;
};

// Non-finite losses or gradients during optimization.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace kd
