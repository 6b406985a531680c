#pragma once

#include <stdexcept>
#include <string>

namespace cdopt {

// Common base so callers can catch any library error broadly.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A spec/config value is out of its documented domain.
struct InvalidSpec : Error {
    using Error::Error;
};

// Random graph generation exhausted its retry budget without connectivity.
struct Disconnected : Error {
    using Error::Error;
};

// Spectral data requested for a graph whose algebraic connectivity is ~0.
struct NotConnected : Error {
    using Error::Error;
};

// Non-finite values fed into a numeric kernel.
struct NumericalError : Error {
    using Error::Error;
};

// KKT system could not be solved to tolerance (rank-deficient draw etc).
struct DegenerateInstance : Error {
    using Error::Error;
};

// Input violates a range precondition (e.g. not coupled-feasible).
struct NotInRange : Error {
    using Error::Error;
};

// Compressor failed its contract check at engine initialization.
struct CompressorRejected : Error {
    using Error::Error;
};

// Step-size search exhausted its budget without a stable candidate.
struct TuningFailed : Error {
    using Error::Error;
};

// Not enough usable data points for a statistical fit.
struct InsufficientData : Error {
    using Error::Error;
};

// Two traces cannot be compared (mismatched round grids).
struct IncomparableTraces : Error {
    using Error::Error;
};

// Config file problem, anchored to a location in the document.
struct ConfigError : Error {
    std::string path;  // dotted key path, e.g. "problem.kind"
    int line;          // 1-based line in the config document (0 = unknown)

    ConfigError(const std::string& message, std::string key_path = {}, int line_no = 0)
        : Error(message), path(std::move(key_path)), line(line_no) {}
};

}  // namespace cdopt
