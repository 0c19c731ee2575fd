#pragma once

#include <stdexcept>
#include <string>

namespace pesqdnn {

// Validation / usage problems (bad config, out-of-range targets). CLI exit code 1.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or dimension mismatches between tensors / blocks.
struct DimensionError : ValidationError {
    explicit DimensionError(const std::string& msg) : ValidationError(msg) {}
};

// API contract violations (e.g. backward on a non-scalar loss).
struct ContractError : ValidationError {
    explicit ContractError(const std::string& msg) : ValidationError(msg) {}
};

// Problems with input data or files. CLI exit code 2.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Corrupt or incompatible persisted artifacts (checkpoints, stores).
struct IntegrityError : DataError {
    explicit IntegrityError(const std::string& msg) : DataError(msg) {}
};

// External tool (codec / EID / PESQ hook) failures. CLI exit code 3.
struct ExternalToolError : std::runtime_error {
    explicit ExternalToolError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace pesqdnn
