// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <mutex>
#include <thread>

#include "tierflow/common.hpp"

namespace tierflow {

// Token-bucket rate limiter used by throttled in-memory tiers. Continuous
// refill with a 1 ms burst capacity; a request may drive the balance
// negative (debt), in which case the caller sleeps until its share of the
// debt has drained. Concurrent acquirers therefore split the configured
// rate between them, which is exactly the contention behaviour a shared
// physical device exhibits. Tiers run one bucket of device-time (rate 1.0,
// tokens are seconds) and charge each transfer bytes/direction_rate, so
// reads and writes contend for the same device like they do on real media.
class TokenBucket {
public:
    explicit TokenBucket(double bytes_per_second) { set_rate(bytes_per_second); }

    void set_rate(double bytes_per_second) {
        if (!(bytes_per_second > 0.0)) throw ConfigError("token bucket rate must be > 0");
        std::lock_guard<std::mutex> g(mu_);
        refill_locked(Clock::now());
        rate_ = bytes_per_second;
    }

    double rate() const {
        std::lock_guard<std::mutex> g(mu_);
        return rate_;
    }

    // Blocks until `amount` tokens may pass at the configured rate.
    void acquire(double amount) {
        Clock::time_point deadline;
        {
            std::lock_guard<std::mutex> g(mu_);
            const auto now = Clock::now();
            refill_locked(now);
            tokens_ -= amount;
            if (tokens_ >= 0.0) return;
            deadline = now + std::chrono::duration_cast<Clock::duration>(
                                 std::chrono::duration<double>(-tokens_ / rate_));
        }
        std::this_thread::sleep_until(deadline);
    }

private:
    using Clock = std::chrono::steady_clock;
    static constexpr double kBurstSeconds = 0.001;

    void refill_locked(Clock::time_point now) {
        if (rate_ > 0.0) {
            const double dt = std::chrono::duration<double>(now - last_).count();
            tokens_ = std::min(tokens_ + dt * rate_, rate_ * kBurstSeconds);
        }
        last_ = now;
    }

    mutable std::mutex mu_;
    double rate_ = 0.0;
    double tokens_ = 0.0;
    Clock::time_point last_ = Clock::now();
};

}  // namespace tierflow
