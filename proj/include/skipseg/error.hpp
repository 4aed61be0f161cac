#pragma once

#include <stdexcept>
#include <string>

namespace skipseg {

/// Invalid shapes, sizes or configuration values.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or out-of-range input data (labels, files).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Checkpoint written by an incompatible format version.
class VersionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(int epoch, int batch)
        : std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch)),
          epoch(epoch), batch(batch) {}

    int epoch;
    int batch;
};

}  // namespace skipseg
