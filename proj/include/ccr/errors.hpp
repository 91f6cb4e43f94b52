#pragma once

#include <stdexcept>
#include <string>

namespace ccr {

// Base for every error the library raises on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor shapes that do not fit an operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Caller broke an API precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
public:
    using Error::Error;
};

// Invalid model / training / run configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

// CSV header or schema file does not describe the data.
class SchemaError : public Error {
public:
    using Error::Error;
};

// Data is unusable after cleaning, or a label is outside the class set.
class DataError : public Error {
public:
    using Error::Error;
};

// SMOTE cannot synthesize for a class.
class AugmentationError : public Error {
public:
    using Error::Error;
};

// Filesystem failures.
class IoError : public Error {
public:
    using Error::Error;
};

// Corrupt or incompatible binary container / checkpoint.
class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace ccr
