// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <unordered_map>
#include <vector>

#include "tierflow/common.hpp"

namespace tierflow {

// Subgroups-per-tier split for one worker's shard.
struct AllocationVector {
    std::vector<int> counts;
    int total = 0;
};

// Bandwidth-proportional subgroup placement: counts_i starts from
// ceil(M * B_i / sum(B)), the overshoot is removed by decrementing the tier
// with the largest T_i/B_i (per-subgroup service time; ties to the higher
// tier id), and a final exchange pass moves single subgroups off the
// worst-ratio tier whenever that strictly lowers max_i(T_i/B_i). The result
// minimizes max_i(T_i/B_i) over all nonnegative integer splits summing to M,
// so slow tiers finish at roughly the same time as fast ones.
inline AllocationVector assign_subgroups(int M, std::span<const double> bandwidths) {
    if (M < 1) throw ConfigError("assign_subgroups: M must be >= 1");
    const std::size_t N = bandwidths.size();
    if (N == 0) throw ConfigError("assign_subgroups: no tiers");
    double sum = 0.0;
    for (double b : bandwidths) {
        if (b < 0.0) throw ConfigError("assign_subgroups: negative bandwidth");
        sum += b;
    }
    if (!(sum > 0.0)) throw ConfigError("assign_subgroups: all bandwidths are zero");

    AllocationVector alloc;
    alloc.total = M;
    alloc.counts.assign(N, 0);
    int allocated = 0;
    for (std::size_t i = 0; i < N; ++i) {
        if (bandwidths[i] > 0.0) {
            alloc.counts[i] =
                static_cast<int>(std::ceil(static_cast<double>(M) * bandwidths[i] / sum));
            allocated += alloc.counts[i];
        }
    }

    auto ratio = [&](std::size_t i) { return alloc.counts[i] / bandwidths[i]; };

    while (allocated > M) {
        std::size_t worst = N;
        double worst_ratio = -1.0;
        for (std::size_t i = 0; i < N; ++i) {
            if (alloc.counts[i] <= 0 || bandwidths[i] <= 0.0) continue;
            const double r = ratio(i);
            if (r > worst_ratio || (r == worst_ratio && i > worst)) {
                worst = i;
                worst_ratio = r;
            }
        }
        --alloc.counts[worst];
        --allocated;
    }

    // Exchange pass. The ceiling caps every tier at ceil(M*B_i/sum), but on
    // skewed bandwidths the optimum can want more than that on a fast tier,
    // so decrementing alone is not enough.
    for (;;) {
        std::size_t src = N;
        double src_ratio = -1.0;
        for (std::size_t i = 0; i < N; ++i) {
            if (alloc.counts[i] <= 0 || bandwidths[i] <= 0.0) continue;
            const double r = ratio(i);
            if (r > src_ratio || (r == src_ratio && i > src)) {
                src = i;
                src_ratio = r;
            }
        }
        if (src == N) break;
        std::size_t dst = N;
        double dst_ratio = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < N; ++j) {
            if (j == src || bandwidths[j] <= 0.0) continue;
            const double r = (alloc.counts[j] + 1) / bandwidths[j];
            if (r < dst_ratio) {
                dst = j;
                dst_ratio = r;
            }
        }
        if (dst == N || dst_ratio >= src_ratio) break;
        --alloc.counts[src];
        ++alloc.counts[dst];
    }
    return alloc;
}

// Per-tier effective bandwidth, min(read, write), smoothed by an EMA over
// observed transfer throughput.
struct BandwidthEstimate {
    struct PerTier {
        double read_bw = 0.0;
        double write_bw = 0.0;
        std::uint64_t sample_count = 0;
    };

    std::vector<PerTier> tiers;
    double alpha = 0.5;  // smoothing factor in (0, 1]

    static BandwidthEstimate init(std::span<const double> read_bw,
                                  std::span<const double> write_bw, double alpha) {
        if (!(alpha > 0.0) || alpha > 1.0)
            throw ConfigError("bandwidth EMA alpha must be in (0, 1]");
        BandwidthEstimate est;
        est.alpha = alpha;
        for (std::size_t i = 0; i < read_bw.size(); ++i)
            est.tiers.push_back(PerTier{read_bw[i], write_bw[i], 0});
        return est;
    }

    double effective(std::size_t i) const {
        return std::min(tiers[i].read_bw, tiers[i].write_bw);
    }

    std::vector<double> effective_all() const {
        std::vector<double> out(tiers.size());
        for (std::size_t i = 0; i < tiers.size(); ++i) out[i] = effective(i);
        return out;
    }
};

// One iteration's observed transfers for one tier. Durations embed transfer
// time only (lock waits are a scheduling property, not a tier property).
struct TierObservation {
    std::uint64_t read_transfers = 0;
    double read_bytes = 0.0;
    double read_seconds = 0.0;
    std::uint64_t write_transfers = 0;
    double write_bytes = 0.0;
    double write_seconds = 0.0;
};

// EMA step: bw <- (1-a)*bw + a*mean(observed). Directions with no transfers
// this iteration keep their previous estimate; an empty set is a no-op.
inline void update_bandwidth_estimates(BandwidthEstimate& est,
                                       std::span<const TierObservation> observed) {
    const std::size_t n = std::min(est.tiers.size(), observed.size());
    for (std::size_t i = 0; i < n; ++i) {
        const TierObservation& o = observed[i];
        auto& t = est.tiers[i];
        if (o.read_transfers > 0 && o.read_seconds > 0.0)
            t.read_bw = (1.0 - est.alpha) * t.read_bw + est.alpha * (o.read_bytes / o.read_seconds);
        if (o.write_transfers > 0 && o.write_seconds > 0.0)
            t.write_bw =
                (1.0 - est.alpha) * t.write_bw + est.alpha * (o.write_bytes / o.write_seconds);
        t.sample_count += o.read_transfers + o.write_transfers;
    }
}

struct CachePlan {
    int capacity = 0;  // host slots available for retention after pipeline reserves
};

struct TierAssignment {
    bool host_retain = false;
    TierId tier = kNoTier;
};

// Flush destinations for one update phase: the last `capacity` subgroups in
// the update order stay host-resident (no flush); the remaining M-C realize
// Eq. 1 restricted to the flushed count, assigned greedily in update order
// to the tier with the most remaining quota (ties: higher bandwidth, then
// lower tier id).
class DestinationPlan {
public:
    DestinationPlan(std::span<const SubgroupId> order, CachePlan cache,
                    std::span<const double> bandwidths) {
        const int M = static_cast<int>(order.size());
        const int retained = std::clamp(cache.capacity, 0, M);
        const int flushed = M - retained;
        flush_allocation_.counts.assign(bandwidths.size(), 0);
        flush_allocation_.total = flushed;
        if (flushed > 0) flush_allocation_ = assign_subgroups(flushed, bandwidths);

        std::vector<int> quota = flush_allocation_.counts;
        for (int k = 0; k < M; ++k) {
            const SubgroupId sg = order[static_cast<std::size_t>(k)];
            if (k >= flushed) {
                map_[sg] = TierAssignment{true, kNoTier};
                continue;
            }
            std::size_t pick = quota.size();
            for (std::size_t i = 0; i < quota.size(); ++i) {
                if (quota[i] <= 0) continue;
                if (pick == quota.size() || quota[i] > quota[pick] ||
                    (quota[i] == quota[pick] && bandwidths[i] > bandwidths[pick]))
                    pick = i;
            }
            if (pick == quota.size())
                throw Error("destination plan: flush quota exhausted");  // unreachable
            --quota[pick];
            map_[sg] = TierAssignment{false, static_cast<TierId>(pick)};
        }
        retained_ = retained;
    }

    TierAssignment assign_storage_tier(SubgroupId sg) const {
        auto it = map_.find(sg);
        if (it == map_.end())
            throw Error("destination plan: unknown subgroup " + std::to_string(sg));
        return it->second;
    }

    const AllocationVector& flush_allocation() const { return flush_allocation_; }
    int retained_count() const { return retained_; }

private:
    std::unordered_map<SubgroupId, TierAssignment> map_;
    AllocationVector flush_allocation_;
    int retained_ = 0;
};

}  // namespace tierflow
