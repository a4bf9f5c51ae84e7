#pragma once

#include <stdexcept>
#include <string>

namespace dmc::core {

// Violated precondition or shape/argument contract.
struct ContractError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Shape mismatch; message names the offending operand or layer.
struct DimensionError : ContractError {
    using ContractError::ContractError;
};

// NaN/Inf surfaced where finite values are required.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Corrupt or incompatible on-disk artifact.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Inconsistent or incomplete run configuration.
struct ConfigurationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace dmc::core
