// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "tierflow/common.hpp"

namespace tierflow {

enum class SlotState { free_slot, prefetching, updating, flushing, cached };

inline const char* slot_state_name(SlotState s) {
    switch (s) {
        case SlotState::free_slot: return "free";
        case SlotState::prefetching: return "prefetching";
        case SlotState::updating: return "updating";
        case SlotState::flushing: return "flushing";
        case SlotState::cached: return "cached";
    }
    return "unknown";
}

// Fixed set of subgroup-sized host buffers backing the three-way overlap:
// one slot flushing out, one updating, one prefetching in, hence the minimum
// of three. Cached slots survive across iterations until the retention plan
// evicts them. Each slot also carries an f32 gradient annex used when the
// gradient path goes through storage (delayed conversion disabled).
class HostBufferPool {
public:
    HostBufferPool(int slot_count, std::uint64_t max_param_count)
        : max_params_(max_param_count) {
        if (slot_count < 3) throw ConfigError("host buffer pool needs >= 3 slots");
        slots_.resize(static_cast<std::size_t>(slot_count));
        for (auto& s : slots_) {
            s.state_buf.resize(3 * max_param_count);
            s.grad_buf.resize(max_param_count);
        }
    }

    int slot_count() const { return static_cast<int>(slots_.size()); }
    std::uint64_t max_param_count() const { return max_params_; }

    // free -> prefetching; also used to stage a host-created subgroup.
    // Returns -1 when no slot is free.
    int try_reserve(SubgroupId owner) {
        std::lock_guard<std::mutex> g(mu_);
        for (std::size_t i = 0; i < slots_.size(); ++i) {
            if (slots_[i].state == SlotState::free_slot) {
                slots_[i].state = SlotState::prefetching;
                slots_[i].owner = owner;
                return static_cast<int>(i);
            }
        }
        return -1;
    }

    int find_cached(SubgroupId owner) const {
        std::lock_guard<std::mutex> g(mu_);
        for (std::size_t i = 0; i < slots_.size(); ++i)
            if (slots_[i].state == SlotState::cached && slots_[i].owner == owner)
                return static_cast<int>(i);
        return -1;
    }

    void prefetch_done(int slot) { transition(slot, SlotState::prefetching, SlotState::cached); }
    void begin_update(int slot) { transition(slot, SlotState::cached, SlotState::updating); }
    void end_update(int slot) { transition(slot, SlotState::updating, SlotState::cached); }
    void begin_flush(int slot) { transition(slot, SlotState::cached, SlotState::flushing); }

    void flush_done(int slot) {
        transition(slot, SlotState::flushing, SlotState::free_slot);
        free_cv_.notify_all();
    }

    void evict(int slot) {
        transition(slot, SlotState::cached, SlotState::free_slot);
        free_cv_.notify_all();
    }

    // Abandon a reservation whose transfer failed.
    void release_failed(int slot) {
        std::lock_guard<std::mutex> g(mu_);
        slots_[check(slot)].state = SlotState::free_slot;
        free_cv_.notify_all();
    }

    SlotState state(int slot) const {
        std::lock_guard<std::mutex> g(mu_);
        return slots_[check(slot)].state;
    }

    SubgroupId owner(int slot) const {
        std::lock_guard<std::mutex> g(mu_);
        return slots_[check(slot)].owner;
    }

    int count(SlotState s) const {
        std::lock_guard<std::mutex> g(mu_);
        int n = 0;
        for (const auto& slot : slots_)
            if (slot.state == s) ++n;
        return n;
    }

    // Wait (bounded) until some slot is free; the caller still has to win
    // the subsequent try_reserve.
    bool wait_for_free(std::chrono::milliseconds timeout) {
        std::unique_lock<std::mutex> g(mu_);
        return free_cv_.wait_for(g, timeout, [&] {
            for (const auto& s : slots_)
                if (s.state == SlotState::free_slot) return true;
            return false;
        });
    }

    std::span<float> state_span(int slot, std::uint64_t param_count) {
        if (param_count > max_params_) throw Error("pool slot too small for subgroup");
        return std::span<float>(slots_[check(slot)].state_buf.data(), 3 * param_count);
    }

    std::span<float> grad_span(int slot, std::uint64_t param_count) {
        if (param_count > max_params_) throw Error("pool slot too small for subgroup");
        return std::span<float>(slots_[check(slot)].grad_buf.data(), param_count);
    }

private:
    struct Slot {
        SlotState state = SlotState::free_slot;
        SubgroupId owner = 0;
        std::vector<float> state_buf;  // params || momentum || variance
        std::vector<float> grad_buf;   // staged f32 gradients (storage gradient path)
    };

    std::size_t check(int slot) const {
        if (slot < 0 || static_cast<std::size_t>(slot) >= slots_.size())
            throw Error("bad pool slot index " + std::to_string(slot));
        return static_cast<std::size_t>(slot);
    }

    void transition(int slot, SlotState expected, SlotState next) {
        std::lock_guard<std::mutex> g(mu_);
        Slot& s = slots_[check(slot)];
        if (s.state != expected)
            throw Error(std::string("pool slot ") + std::to_string(slot) + ": invalid transition " +
                        slot_state_name(s.state) + " -> " + slot_state_name(next) + " (expected " +
                        slot_state_name(expected) + ")");
        s.state = next;
    }

    mutable std::mutex mu_;
    std::condition_variable free_cv_;
    std::vector<Slot> slots_;
    std::uint64_t max_params_;
};

}  // namespace tierflow
