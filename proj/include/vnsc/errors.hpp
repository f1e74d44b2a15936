#ifndef VNSC_ERRORS_HPP
#define VNSC_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace vnsc {

// Invalid sizes, strides, channel counts or hyperparameters.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Speech and visual streams disagree on frame count.
struct AlignmentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A call that is well-formed but not allowed in the current mode.
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

// Malformed or unsupported input files (WAV, lip files, bitstreams, checkpoints).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A forward or backward pass produced NaN/Inf.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace vnsc

#endif // VNSC_ERRORS_HPP
