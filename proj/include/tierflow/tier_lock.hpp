// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>

#include "tierflow/common.hpp"
#include "tierflow/trace.hpp"

namespace tierflow {

inline std::filesystem::path tier_lock_path(const std::filesystem::path& lock_dir, TierId tier) {
    return lock_dir / ("tier_" + std::to_string(tier) + ".lock");
}

namespace detail {
// A worker never holds two tier locks at once (always release before
// acquire); enforced per thread since guards may not cross threads.
inline thread_local int tier_locks_held = 0;
}  // namespace detail

// Node-level advisory lock on one tier, implemented as flock(2) on
// <lock_dir>/tier_<id>.lock. Each guard opens its own descriptor, so the
// exclusion holds both across OS processes sharing the node and across
// threads within a process (flock conflicts between open file descriptions).
// lock_acquire is traced after the lock is held and lock_release before it
// is dropped, so traced held-intervals are contained in real ones.
class TierLockGuard {
public:
    TierLockGuard(const std::filesystem::path& lock_dir, TierId tier, WorkerId worker,
                  EventTrace* trace)
        : tier_(tier), worker_(worker), trace_(trace) {
        if (detail::tier_locks_held != 0)
            throw Error("worker already holds a tier lock (no nesting allowed)");
        std::error_code ec;
        std::filesystem::create_directories(lock_dir, ec);
        if (ec) throw ConfigError("lock directory unavailable: " + lock_dir.string());
        const auto path = tier_lock_path(lock_dir, tier);
        fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
        if (fd_ < 0)
            throw ConfigError("cannot open lock file " + path.string() + ": " +
                              std::strerror(errno));
        while (::flock(fd_, LOCK_EX) != 0) {
            if (errno != EINTR) {
                const int err = errno;
                ::close(fd_);
                fd_ = -1;
                throw IoError("flock failed on " + path.string() + ": " + std::strerror(err));
            }
        }
        ++detail::tier_locks_held;
        if (trace_) trace_->record(EventKind::lock_acquire, worker_, -1, tier_, 0);
    }

    TierLockGuard(TierLockGuard&& other) noexcept
        : fd_(std::exchange(other.fd_, -1)),
          tier_(other.tier_),
          worker_(other.worker_),
          trace_(std::exchange(other.trace_, nullptr)) {}

    TierLockGuard& operator=(TierLockGuard&& other) noexcept {
        if (this != &other) {
            release();
            fd_ = std::exchange(other.fd_, -1);
            tier_ = other.tier_;
            worker_ = other.worker_;
            trace_ = std::exchange(other.trace_, nullptr);
        }
        return *this;
    }

    TierLockGuard(const TierLockGuard&) = delete;
    TierLockGuard& operator=(const TierLockGuard&) = delete;

    ~TierLockGuard() { release(); }

    void release() {
        if (fd_ < 0) return;
        if (trace_) trace_->record(EventKind::lock_release, worker_, -1, tier_, 0);
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
        fd_ = -1;
        --detail::tier_locks_held;
    }

    bool held() const { return fd_ >= 0; }

private:
    int fd_ = -1;
    TierId tier_ = kNoTier;
    WorkerId worker_ = 0;
    EventTrace* trace_ = nullptr;
};

inline TierLockGuard acquire_tier_lock(const std::filesystem::path& lock_dir, TierId tier,
                                       WorkerId worker, EventTrace* trace = nullptr) {
    return TierLockGuard(lock_dir, tier, worker, trace);
}

}  // namespace tierflow
