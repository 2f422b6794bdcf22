#pragma once

#include <stdexcept>
#include <string>

namespace ltood {

/// Invalid dataset/model/operation parameters (bad rho, bad k, bad masks, ...).
struct SpecError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed or truncated binary files.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dimension mismatch between operands.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss or gradient.
struct TrainError : std::runtime_error {
    int epoch;
    TrainError(const std::string& msg, int epoch_)
        : std::runtime_error(msg), epoch(epoch_) {}
};

/// Metric computation on empty or non-finite inputs.
struct MetricError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad configuration file or flag value.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Pipeline stage failure; carries the stage name for CLI reporting.
struct StageError : std::runtime_error {
    std::string stage;
    StageError(const std::string& stage_, const std::string& msg)
        : std::runtime_error("stage '" + stage_ + "': " + msg), stage(stage_) {}
};

}  // namespace ltood
