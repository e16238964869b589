// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstdint>
#include <istream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tierflow/common.hpp"

namespace tierflow {

enum class EventKind : int {
    prefetch_start,
    prefetch_end,
    update_start,
    update_end,
    flush_start,
    flush_end,
    lock_acquire,
    lock_release,
    h2d_start,
    h2d_end,
    grad_upscale_start,
    grad_upscale_end,
    cache_hit,
};

inline const char* event_kind_name(EventKind k) {
    switch (k) {
        case EventKind::prefetch_start: return "prefetch_start";
        case EventKind::prefetch_end: return "prefetch_end";
        case EventKind::update_start: return "update_start";
        case EventKind::update_end: return "update_end";
        case EventKind::flush_start: return "flush_start";
        case EventKind::flush_end: return "flush_end";
        case EventKind::lock_acquire: return "lock_acquire";
        case EventKind::lock_release: return "lock_release";
        case EventKind::h2d_start: return "h2d_start";
        case EventKind::h2d_end: return "h2d_end";
        case EventKind::grad_upscale_start: return "grad_upscale_start";
        case EventKind::grad_upscale_end: return "grad_upscale_end";
        case EventKind::cache_hit: return "cache_hit";
    }
    return "unknown";
}

inline bool event_kind_from_name(std::string_view name, EventKind& out) {
    for (int i = 0; i <= static_cast<int>(EventKind::cache_hit); ++i) {
        const auto k = static_cast<EventKind>(i);
        if (name == event_kind_name(k)) {
            out = k;
            return true;
        }
    }
    return false;
}

struct Event {
    std::int64_t timestamp_ns = 0;
    WorkerId worker_id = 0;
    EventKind kind = EventKind::prefetch_start;
    std::int64_t subgroup_id = -1;  // -1 when not tied to a subgroup
    TierId tier_id = kNoTier;
    std::uint64_t bytes = 0;
};

// Append-only event log shared by every thread of a run. Appends are cheap
// (one mutex, one push_back); analysis happens on snapshots after the fact.
// The monotone progress counter feeds the scheduler's deadlock watchdog.
class EventTrace {
public:
    void append(Event ev) {
        std::lock_guard<std::mutex> g(mu_);
        events_.push_back(ev);
        progress_.fetch_add(1, std::memory_order_relaxed);
    }

    void record(EventKind kind, WorkerId worker, std::int64_t subgroup, TierId tier,
                std::uint64_t bytes) {
        append(Event{now_ns(), worker, kind, subgroup, tier, bytes});
    }

    std::uint64_t progress_count() const { return progress_.load(std::memory_order_relaxed); }

    std::size_t size() const {
        std::lock_guard<std::mutex> g(mu_);
        return events_.size();
    }

    std::vector<Event> snapshot() const {
        std::lock_guard<std::mutex> g(mu_);
        return events_;
    }

    // Events appended at index >= begin; lets per-iteration metrics avoid
    // copying the whole run history.
    std::vector<Event> snapshot_from(std::size_t begin) const {
        std::lock_guard<std::mutex> g(mu_);
        if (begin >= events_.size()) return {};
        return std::vector<Event>(events_.begin() + static_cast<std::ptrdiff_t>(begin),
                                  events_.end());
    }

    void clear() {
        std::lock_guard<std::mutex> g(mu_);
        events_.clear();
    }

    static constexpr const char* kCsvHeader =
        "timestamp_ns,worker_id,kind,subgroup_id,tier_id,bytes";

    static void write_csv(std::ostream& os, const std::vector<Event>& events) {
        os << kCsvHeader << "\n";
        for (const Event& e : events) {
            os << e.timestamp_ns << ',' << e.worker_id << ',' << event_kind_name(e.kind) << ','
               << e.subgroup_id << ',' << e.tier_id << ',' << e.bytes << "\n";
        }
    }

    static void write_jsonl(std::ostream& os, const std::vector<Event>& events) {
        for (const Event& e : events) {
            os << "{\"timestamp_ns\":" << e.timestamp_ns << ",\"worker_id\":" << e.worker_id
               << ",\"kind\":\"" << event_kind_name(e.kind) << "\""
               << ",\"subgroup_id\":" << e.subgroup_id << ",\"tier_id\":" << e.tier_id
               << ",\"bytes\":" << e.bytes << "}\n";
        }
    }

    static std::vector<Event> read_csv(std::istream& is) {
        std::vector<Event> out;
        std::string line;
        bool first = true;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            if (first) {
                first = false;
                if (line.rfind("timestamp_ns", 0) == 0) continue;
            }
            std::stringstream ss(line);
            std::string field;
            Event e;
            std::getline(ss, field, ',');
            e.timestamp_ns = std::stoll(field);
            std::getline(ss, field, ',');
            e.worker_id = std::stoi(field);
            std::getline(ss, field, ',');
            if (!event_kind_from_name(field, e.kind))
                throw FormatError("unknown trace event kind: " + field);
            std::getline(ss, field, ',');
            e.subgroup_id = std::stoll(field);
            std::getline(ss, field, ',');
            e.tier_id = std::stoi(field);
            std::getline(ss, field, ',');
            e.bytes = std::stoull(field);
            out.push_back(e);
        }
        return out;
    }

private:
    mutable std::mutex mu_;
    std::vector<Event> events_;
    std::atomic<std::uint64_t> progress_{0};
};

}  // namespace tierflow
