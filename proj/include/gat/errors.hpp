#pragma once

#include <stdexcept>
#include <string>

namespace gat {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape disagreement; message names both shapes.
struct DimensionError : Error {
    using Error::Error;
};

// API precondition violated (empty batch, non-scalar loss, ...).
struct ContractError : Error {
    using Error::Error;
};

// Domain data failed validation (degenerate box, bad token, ...).
struct ValidationError : Error {
    using Error::Error;
};

// Non-finite value detected where finiteness is required.
struct NumericError : Error {
    using Error::Error;
};

// Scene generation could not satisfy its constraints.
struct GenerationError : Error {
    using Error::Error;
};

// File could not be read or written.
struct IoError : Error {
    using Error::Error;
};

// Checkpoint file rejected; `kind` distinguishes the failure mode.
struct CheckpointError : Error {
    enum class Kind { bad_magic, truncated, bad_crc, bad_config, shape_mismatch };

    CheckpointError(Kind k, const std::string& msg) : Error(msg), kind(k) {}

    Kind kind;
};

// Loaded artifacts disagree (checkpoint vocabulary vs dataset, ...).
struct ArtifactMismatchError : Error {
    using Error::Error;
};

}  // namespace gat
