#pragma once

#include <stdexcept>
#include <string>

namespace bicat {

// Shape/dimension violations in tensor arithmetic.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed or unreadable input data (parse errors, bad records, missing files).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : DataError {
    using DataError::DataError;
};

// A pipeline stage was invoked before its prerequisite artifacts exist.
struct StageOrderError : DataError {
    using DataError::DataError;
};

// Checkpoint and config disagree (vocab size, embedding width, ...).
struct CompatibilityError : DataError {
    using DataError::DataError;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SplitError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SamplingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// No supervised positions left for a loss term.
struct LossError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite loss during training; carries the failing step index.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& what, std::size_t step)
        : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_index(step) {}
    std::size_t step_index;
};

struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A conditional probability query whose denominator count is zero.
struct UndefinedConditionalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Evaluation protocol violations (e.g. ground truth missing from candidates).
struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MetricError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace bicat
