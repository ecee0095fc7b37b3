#pragma once

#include <stdexcept>
#include <string>

namespace rcp {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Dimension/shape contract violations; message names the offending shapes.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Non-finite values, degenerate masks, failed numeric preconditions.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// A softmax row whose entries are all -inf.
struct MaskedRowError : NumericError {
    explicit MaskedRowError(const std::string& msg) : NumericError(msg) {}
};

// A reduction over an empty token region.
struct EmptyRegionError : Error {
    explicit EmptyRegionError(const std::string& msg) : Error(msg) {}
};

// Invalid or inconsistent run configuration.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Missing or malformed files (checkpoints, run directories).
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace rcp
