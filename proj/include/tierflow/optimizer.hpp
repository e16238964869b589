// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "tierflow/common.hpp"

namespace tierflow {

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("optim.lr must be > 0");
        if (beta1 < 0.0 || beta1 >= 1.0) throw ConfigError("optim.beta1 must be in [0, 1)");
        if (beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("optim.beta2 must be in [0, 1)");
        if (!(eps > 0.0)) throw ConfigError("optim.eps must be > 0");
        if (weight_decay < 0.0) throw ConfigError("optim.weight_decay must be >= 0");
    }
};

enum class Residency { host_cached, in_flight, on_tier };

// One shard of FP32 optimizer state; the unit of placement, I/O and update.
// State tensors live in a host pool slot while host-resident; this struct
// carries the metadata. Residency may only walk the cycle
// host_cached -> in_flight -> on_tier -> in_flight -> host_cached.
struct Subgroup {
    SubgroupId id = 0;
    std::uint64_t param_count = 0;
    Residency residency = Residency::host_cached;
    TierId tier = kNoTier;  // meaningful while on_tier (and as origin while in_flight)
    int slot = -1;          // pool slot while host-resident
    std::uint64_t step_count = 0;

    void begin_flush() {
        if (residency != Residency::host_cached)
            throw Error("subgroup " + std::to_string(id) + ": flush from non-host residency");
        residency = Residency::in_flight;
    }

    void finish_flush(TierId dest) {
        if (residency != Residency::in_flight)
            throw Error("subgroup " + std::to_string(id) + ": finish_flush while not in flight");
        residency = Residency::on_tier;
        tier = dest;
        slot = -1;
    }

    void begin_prefetch() {
        if (residency != Residency::on_tier)
            throw Error("subgroup " + std::to_string(id) + ": prefetch while not on a tier");
        residency = Residency::in_flight;
    }

    void finish_prefetch(int pool_slot) {
        if (residency != Residency::in_flight)
            throw Error("subgroup " + std::to_string(id) + ": finish_prefetch while not in flight");
        residency = Residency::host_cached;
        slot = pool_slot;
    }
};

// Views into a subgroup's three state tensors (equal length = param_count).
struct StateView {
    std::span<float> params;
    std::span<float> momentum;
    std::span<float> variance;

    // Pool slots store the three tensors contiguously: params || momentum || variance.
    static StateView from_contiguous(std::span<float> state, std::uint64_t param_count) {
        if (state.size() != 3 * param_count) throw Error("state view: length mismatch");
        return StateView{state.subspan(0, param_count), state.subspan(param_count, param_count),
                         state.subspan(2 * param_count, param_count)};
    }
};

namespace detail {

inline void adam_chunk(StateView& s, std::span<const float> grads, const AdamHyper& h,
                       double bc1, double bc2, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
        double p = s.params[i];
        double m = s.momentum[i];
        double v = s.variance[i];
        const double g = grads[i];
        if (h.weight_decay != 0.0) p -= h.lr * h.weight_decay * p;
        m = h.beta1 * m + (1.0 - h.beta1) * g;
        v = h.beta2 * v + (1.0 - h.beta2) * g * g;
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        p -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
        s.params[i] = static_cast<float>(p);
        s.momentum[i] = static_cast<float>(m);
        s.variance[i] = static_cast<float>(v);
    }
}

}  // namespace detail

// Adam with bias correction, decoupled weight decay applied before the Adam
// delta. Element math runs in double and stores back to f32. Parallel
// threads pull fixed 64Ki-element contiguous chunks, so results are bitwise
// identical for any thread count.
inline void adam_step(StateView state, std::span<const float> grads, const AdamHyper& h,
                      std::uint64_t t, int threads = 1) {
    const std::size_t n = state.params.size();
    if (state.momentum.size() != n || state.variance.size() != n)
        throw Error("adam_step: state tensor length mismatch");
    if (grads.size() != n) throw Error("adam_step: gradient length mismatch");
    if (t < 1) throw Error("adam_step: timestep must be >= 1");
    h.validate();

    bool finite = true;
    for (const float g : grads) finite &= (g - g == 0.0f);  // false for NaN and +-Inf
    if (!finite) throw GradientOverflowError("adam_step: non-finite gradients");

    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));

    constexpr std::size_t kChunk = 64 * 1024;
    const std::size_t chunks = (n + kChunk - 1) / kChunk;
    const int nthreads =
        std::max(1, std::min<int>(threads, static_cast<int>(std::min<std::size_t>(chunks, 64))));

    if (nthreads == 1) {
        detail::adam_chunk(state, grads, h, bc1, bc2, 0, n);
        return;
    }

    std::atomic<std::size_t> next{0};
    auto run = [&] {
        for (;;) {
            const std::size_t c = next.fetch_add(1, std::memory_order_relaxed);
            if (c >= chunks) return;
            const std::size_t begin = c * kChunk;
            const std::size_t end = std::min(n, begin + kChunk);
            detail::adam_chunk(state, grads, h, bc1, bc2, begin, end);
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(nthreads) - 1);
    for (int i = 1; i < nthreads; ++i) pool.emplace_back(run);
    run();
    for (auto& th : pool) th.join();
}

// Millions of parameters updated per second.
inline double update_throughput_mparams(std::uint64_t params_updated, double wall_seconds) {
    if (!(wall_seconds > 0.0)) throw Error("update_throughput: wall time must be > 0");
    return static_cast<double>(params_updated) / wall_seconds / 1e6;
}

}  // namespace tierflow
