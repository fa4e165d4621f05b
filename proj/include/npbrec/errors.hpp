#pragma once

#include <stdexcept>
#include <string>

namespace npbrec {

// Shape/precondition violations on tensor operations.
struct shape_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Bad user-facing configuration (unknown keys, invalid values). CLI exit code 2.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dataset / checkpoint file problems. CLI exit code 3.
struct data_error : std::runtime_error {
    enum class kind { io, corrupt_header, shape_mismatch, checksum, other };

    data_error(kind k, const std::string& msg) : std::runtime_error(msg), what_kind(k) {}
    explicit data_error(const std::string& msg) : std::runtime_error(msg), what_kind(kind::other) {}

    kind what_kind;
};

// Non-finite loss during training. CLI exit code 4.
struct divergence_error : std::runtime_error {
    divergence_error(int epoch, int sample, const std::string& msg)
        : std::runtime_error(msg), epoch(epoch), sample(sample) {}

    int epoch;
    int sample;
};

}  // namespace npbrec
