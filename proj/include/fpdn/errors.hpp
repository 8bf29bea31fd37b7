#pragma once

#include <stdexcept>
#include <string>

namespace fpdn {

// Base class for everything this library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape or dimension disagreement; message names the offending dimension.
struct ShapeError : Error {
    using Error::Error;
};

// Non-finite values or numeric preconditions (NaN gradients, bad rates).
struct NumericError : Error {
    using Error::Error;
};

// Valid arguments asking for a configuration the op does not implement.
struct UnsupportedError : Error {
    using Error::Error;
};

// File and stream failures; message carries path and, for parsers, a byte offset.
struct IoError : Error {
    using Error::Error;
};

// Checkpoint container problems: bad magic, version, truncation, shape table mismatch.
struct CheckpointError : Error {
    using Error::Error;
};

// Run configuration problems: unknown keys, unparsable values, invalid flags.
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace fpdn
