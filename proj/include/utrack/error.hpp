#pragma once

#include <stdexcept>
#include <string>

namespace utrack {

// Base type for every error raised by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Mismatched or impossible tensor shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration values (patch sizes, factors, unknown keys, ...).
struct ConfigError : Error {
    using Error::Error;
};

// A caller violated an operation's stated precondition.
struct ContractError : Error {
    using Error::Error;
};

// Mathematical domain violations (nonpositive sigma, zero-area box, ...).
struct DomainError : Error {
    using Error::Error;
};

// Bad user input: missing files, malformed sequences, boxes outside frames.
struct InputError : Error {
    using Error::Error;
};

// Non-finite values or numerically invalid state mid-computation.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace utrack
