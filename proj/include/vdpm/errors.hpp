#pragma once

#include <stdexcept>
#include <string>

namespace vdpm {

/// Base class for all errors raised by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor/feature shape incompatibility; the message names both shapes.
struct ShapeError : Error {
    using Error::Error;
};

/// Two point maps (or other representations) that cannot be combined,
/// e.g. scene flow across different source frames.
struct MismatchError : Error {
    using Error::Error;
};

/// Degenerate numerical input: rank-deficient alignment, empty valid set,
/// all-zero scale and similar.
struct DegenerateError : Error {
    using Error::Error;
};

/// Invalid configuration value or unparseable config document.
struct ConfigError : Error {
    using Error::Error;
};

/// A call that violates an API contract (non-scalar loss, missing cache,
/// mismatched trajectory lengths, ...).
struct ContractError : Error {
    using Error::Error;
};

/// Metric requested on an empty/undefined support.
struct MetricError : Error {
    using Error::Error;
};

/// File format or I/O failure; the message carries the path.
struct IoError : Error {
    using Error::Error;
};

} // namespace vdpm
