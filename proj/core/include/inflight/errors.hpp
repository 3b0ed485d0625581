#pragma once

#include <stdexcept>
#include <string>

namespace inflight {

// Pipeline stages, used both for error labeling and for CLI exit codes.
enum class Stage {
    config = 2,
    data = 3,
    attack = 4,
    train = 5,
    recover = 6,
    detect = 7,
    evaluate = 8,
    io = 9,
    internal = 10,
};

const char* stage_name(Stage s);

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input files (bad IDX magic, truncated payload, ...).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SplitError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Pattern construction / embedding / poisoning problems.
struct AttackError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainError : std::runtime_error {
    int epoch;
    TrainError(const std::string& what, int epoch_) : std::runtime_error(what), epoch(epoch_) {}
};

// Dimension/tap mismatches between caller and model/detector surfaces.
struct InterfaceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BankError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MetricError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BaselineError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown by run_experiment: wraps any sub-module failure with the stage it
// occurred in so the CLI can exit with a distinct per-stage code.
struct StageError : std::runtime_error {
    Stage stage;
    StageError(Stage s, const std::string& what)
        : std::runtime_error(std::string(stage_name(s)) + ": " + what), stage(s) {}
};

}  // namespace inflight
