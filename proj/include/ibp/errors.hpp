#pragma once

#include <stdexcept>
#include <string>

namespace ibp {

// Shape disagreement between operands.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Invalid geometry or hyperparameters.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed file contents (IDX, CIFAR, model files).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// An operation ran before the state it depends on was populated,
// e.g. vjp() before forward().
struct StateError : std::logic_error {
    using std::logic_error::logic_error;
};

// Non-finite values or a numeric domain violation.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace ibp
