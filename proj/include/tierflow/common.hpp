// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace tierflow {

using SubgroupId = std::uint32_t;
using TierId = int;
using WorkerId = int;

inline constexpr TierId kNoTier = -1;

// Steady timestamps in nanoseconds. On Linux this is CLOCK_MONOTONIC, which
// shares its epoch across processes on one host, so merged traces from
// multi-process runs stay comparable.
inline std::int64_t now_ns() {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

struct IoStats {
    std::uint64_t bytes = 0;
    double seconds = 0.0;

    double bytes_per_second() const {
        return seconds > 0.0 ? static_cast<double>(bytes) / seconds : 0.0;
    }
};

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Storage backend failures (disk full, permissions, unreachable root).
class IoError : public Error {
public:
    using Error::Error;
};

// Malformed subgroup file (bad magic/version/length).
class FormatError : public Error {
public:
    using Error::Error;
};

// Bad or inconsistent configuration, including unusable lock directories.
class ConfigError : public Error {
public:
    using Error::Error;
};

// A read was issued for a subgroup the tier does not hold. This signals a
// scheduler bug, not a storage failure.
class PlacementInconsistencyError : public Error {
public:
    using Error::Error;
};

// The pipeline watchdog saw no trace progress for the configured timeout.
class SchedulingBugError : public Error {
public:
    using Error::Error;
};

// Non-finite gradients reached an update kernel.
class GradientOverflowError : public Error {
public:
    using Error::Error;
};

}  // namespace tierflow
