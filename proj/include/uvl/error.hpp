#pragma once

#include <stdexcept>
#include <string>

namespace uvl {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape / dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

// Attention mask violations (e.g. a query row with no allowed key).
struct MaskError : Error {
    using Error::Error;
};

// Invalid configuration, CLI usage, or corpus spec. Maps to exit code 2.
struct ConfigError : Error {
    using Error::Error;
};

// Bad data fed to an operation (unknown token, out-of-vocabulary id, ...).
struct DataError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required. Maps to exit code 3.
struct NumericError : Error {
    using Error::Error;
};

// File format / read / write failures. Maps to exit code 4.
struct IoError : Error {
    using Error::Error;
};

} // namespace uvl
