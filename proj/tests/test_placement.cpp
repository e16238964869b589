// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "tierflow/placement.hpp"

#include "oracles.hpp"

using namespace tierflow;

namespace {

double max_ratio(const AllocationVector& a, const std::vector<double>& B) {
    double m = 0.0;
    for (std::size_t i = 0; i < B.size(); ++i)
        if (B[i] > 0.0) m = std::max(m, a.counts[i] / B[i]);
    return m;
}

int sum(const AllocationVector& a) {
    int s = 0;
    for (int c : a.counts) s += c;
    return s;
}

}  // namespace

TEST_CASE("proportional split with no overshoot", "[placement]") {
    const std::vector<double> B = {2.0, 1.0};
    const auto a = assign_subgroups(12, B);
    REQUIRE(a.counts == std::vector<int>{8, 4});
}

TEST_CASE("the paper-scale 2:1 split lands within one subgroup", "[placement]") {
    const std::vector<double> B = {2.0, 1.0};
    const auto a = assign_subgroups(40, B);
    CHECK(sum(a) == 40);
    CHECK(std::abs(a.counts[0] - 2.0 * a.counts[1]) <= 2.0);  // 2:1 +- 1 subgroup
    CHECK(max_ratio(a, B) == Catch::Approx(oracle::brute_force_min_max_ratio(40, B)));
}

TEST_CASE("ceiling overshoot is adjusted to the brute-force optimum", "[placement]") {
    const std::vector<double> B = {5.3, 3.6};
    const auto a = assign_subgroups(4, B);
    REQUIRE(sum(a) == 4);
    const double opt = oracle::brute_force_min_max_ratio(4, B);
    REQUIRE(max_ratio(a, B) == Catch::Approx(opt).epsilon(1e-12));
}

TEST_CASE("random vectors meet the brute-force optimum", "[placement]") {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> pick_n(1, 4);
    std::uniform_int_distribution<int> pick_m(1, 24);
    std::uniform_real_distribution<double> pick_exp(-1.5, 1.5);
    for (int trial = 0; trial < 300; ++trial) {
        const int N = pick_n(rng);
        const int M = pick_m(rng);
        std::vector<double> B(static_cast<std::size_t>(N));
        bool any = false;
        for (auto& b : B) {
            b = (rng() % 20 == 0) ? 0.0 : std::pow(10.0, pick_exp(rng));
            any = any || b > 0.0;
        }
        if (!any) B[0] = 1.0;
        const auto a = assign_subgroups(M, B);
        REQUIRE(sum(a) == M);
        for (std::size_t i = 0; i < B.size(); ++i) {
            REQUIRE(a.counts[i] >= 0);
            if (B[i] == 0.0) REQUIRE(a.counts[i] == 0);
        }
        const double opt = oracle::brute_force_min_max_ratio(M, B);
        INFO("M=" << M << " N=" << N);
        REQUIRE(max_ratio(a, B) <= opt * (1.0 + 1e-12));
    }
}

TEST_CASE("allocation properties: scale invariance, identity, monotonicity", "[placement]") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> bw(0.1, 50.0);
    for (int trial = 0; trial < 200; ++trial) {
        const int M = 1 + static_cast<int>(rng() % 40);
        std::vector<double> B = {bw(rng), bw(rng), bw(rng)};
        const auto a = assign_subgroups(M, B);

        for (const double c : {0.5, 2.0, 1024.0, 3.7}) {
            std::vector<double> scaled = B;
            for (auto& b : scaled) b *= c;
            REQUIRE(assign_subgroups(M, scaled).counts == a.counts);
        }

        // Raising one tier's bandwidth never reduces its share.
        std::vector<double> boosted = B;
        boosted[1] *= 1.7;
        REQUIRE(assign_subgroups(M, boosted).counts[1] >= a.counts[1]);
    }

    const std::vector<double> one = {3.14};
    REQUIRE(assign_subgroups(17, one).counts == std::vector<int>{17});
}

TEST_CASE("allocation input validation", "[placement]") {
    const std::vector<double> zeros = {0.0, 0.0};
    CHECK_THROWS_AS(assign_subgroups(4, zeros), ConfigError);
    const std::vector<double> ok = {1.0};
    CHECK_THROWS_AS(assign_subgroups(0, ok), ConfigError);
    const std::vector<double> neg = {1.0, -2.0};
    CHECK_THROWS_AS(assign_subgroups(4, neg), ConfigError);
}

TEST_CASE("bandwidth estimates start at min(read, write)", "[placement]") {
    const std::vector<double> r = {6.9e9, 3.6e9};
    const std::vector<double> w = {5.3e9, 3.6e9};
    const auto est = BandwidthEstimate::init(r, w, 0.5);
    CHECK(est.effective(0) == 5.3e9);
    CHECK(est.effective(1) == 3.6e9);
}

TEST_CASE("EMA update arithmetic", "[placement]") {
    // alpha = 1: full replacement.
    {
        auto est = BandwidthEstimate::init(std::vector<double>{200e6},
                                           std::vector<double>{200e6}, 1.0);
        TierObservation o;
        o.read_transfers = 2;
        o.read_bytes = 300e6;
        o.read_seconds = 2.0;
        o.write_transfers = 2;
        o.write_bytes = 300e6;
        o.write_seconds = 2.0;
        update_bandwidth_estimates(est, std::vector<TierObservation>{o});
        CHECK(est.effective(0) == Catch::Approx(150e6));
        CHECK(est.tiers[0].sample_count == 4);
    }
    // alpha = 0.5: halfway.
    {
        auto est = BandwidthEstimate::init(std::vector<double>{200e6},
                                           std::vector<double>{200e6}, 0.5);
        TierObservation o;
        o.read_transfers = 1;
        o.read_bytes = 100e6;
        o.read_seconds = 1.0;
        o.write_transfers = 1;
        o.write_bytes = 100e6;
        o.write_seconds = 1.0;
        update_bandwidth_estimates(est, std::vector<TierObservation>{o});
        CHECK(est.effective(0) == Catch::Approx(150e6));
    }
    // No transfers: untouched. Read-only update keeps min semantics.
    {
        auto est = BandwidthEstimate::init(std::vector<double>{200e6, 64e6},
                                           std::vector<double>{100e6, 64e6}, 0.5);
        std::vector<TierObservation> obs(2);
        obs[0].read_transfers = 1;
        obs[0].read_bytes = 50e6;
        obs[0].read_seconds = 1.0;  // read EMA -> 125e6; write stays 100e6
        update_bandwidth_estimates(est, obs);
        CHECK(est.tiers[0].read_bw == Catch::Approx(125e6));
        CHECK(est.tiers[0].write_bw == Catch::Approx(100e6));
        CHECK(est.effective(0) == Catch::Approx(100e6));
        CHECK(est.effective(1) == 64e6);
        CHECK(est.effective(0) > 0.0);
    }
}

TEST_CASE("EMA fixed point: identical iterations, identical allocations", "[placement]") {
    auto est = BandwidthEstimate::init(std::vector<double>{200e6, 100e6},
                                       std::vector<double>{200e6, 100e6}, 1.0);
    TierObservation o0, o1;
    o0.read_transfers = o0.write_transfers = 4;
    o0.read_bytes = o0.write_bytes = 800e6;
    o0.read_seconds = o0.write_seconds = 4.0;  // 200 MB/s
    o1.read_transfers = o1.write_transfers = 2;
    o1.read_bytes = o1.write_bytes = 200e6;
    o1.read_seconds = o1.write_seconds = 2.0;  // 100 MB/s
    const std::vector<TierObservation> obs = {o0, o1};
    update_bandwidth_estimates(est, obs);
    const auto alloc1 = assign_subgroups(12, est.effective_all());
    update_bandwidth_estimates(est, obs);
    const auto alloc2 = assign_subgroups(12, est.effective_all());
    REQUIRE(alloc1.counts == alloc2.counts);
}

TEST_CASE("a mid-run bandwidth drop shifts the allocation within two iterations",
          "[placement]") {
    auto est = BandwidthEstimate::init(std::vector<double>{200e6, 200e6},
                                       std::vector<double>{200e6, 200e6}, 0.5);
    const int M = 16;
    const int before = assign_subgroups(M, est.effective_all()).counts[1];

    auto observe_tier1_at = [&](double bytes_per_s) {
        std::vector<TierObservation> obs(2);
        obs[0].read_transfers = obs[0].write_transfers = 1;
        obs[0].read_bytes = obs[0].write_bytes = 200e6;
        obs[0].read_seconds = obs[0].write_seconds = 1.0;
        obs[1].read_transfers = obs[1].write_transfers = 1;
        obs[1].read_bytes = obs[1].write_bytes = bytes_per_s;
        obs[1].read_seconds = obs[1].write_seconds = 1.0;
        update_bandwidth_estimates(est, obs);
    };

    observe_tier1_at(100e6);  // the tier has slowed to 100 MB/s
    const int after1 = assign_subgroups(M, est.effective_all()).counts[1];
    observe_tier1_at(100e6);
    const int after2 = assign_subgroups(M, est.effective_all()).counts[1];
    CHECK(after1 <= before);
    CHECK(after2 < before);  // strictly fewer subgroups within two iterations
}

TEST_CASE("destination plan retains the tail of the order", "[placement]") {
    const std::vector<double> B = {2.0, 1.0};

    // M=6, C=2, ascending: 4 and 5 retained, 0..3 flushed.
    {
        const std::vector<SubgroupId> order = {0, 1, 2, 3, 4, 5};
        DestinationPlan plan(order, CachePlan{2}, B);
        CHECK(plan.retained_count() == 2);
        CHECK(plan.assign_storage_tier(4).host_retain);
        CHECK(plan.assign_storage_tier(5).host_retain);
        int flushed = 0;
        std::vector<int> per_tier(2, 0);
        for (SubgroupId id : {0u, 1u, 2u, 3u}) {
            const auto a = plan.assign_storage_tier(id);
            REQUIRE_FALSE(a.host_retain);
            ++per_tier[static_cast<std::size_t>(a.tier)];
            ++flushed;
        }
        CHECK(flushed == 4);
        CHECK(per_tier == plan.flush_allocation().counts);
        CHECK(per_tier[0] + per_tier[1] == 4);
    }

    // C=0: everything flushed, allocation equals assign_subgroups exactly.
    {
        const std::vector<SubgroupId> order = {0, 1, 2, 3, 4, 5};
        DestinationPlan plan(order, CachePlan{0}, B);
        CHECK(plan.retained_count() == 0);
        CHECK(plan.flush_allocation().counts == assign_subgroups(6, B).counts);
        for (SubgroupId id : order) CHECK_FALSE(plan.assign_storage_tier(id).host_retain);
    }

    // C >= M: nothing flushed.
    {
        const std::vector<SubgroupId> order = {0, 1, 2};
        DestinationPlan plan(order, CachePlan{5}, B);
        CHECK(plan.retained_count() == 3);
        for (SubgroupId id : order) CHECK(plan.assign_storage_tier(id).host_retain);
    }

    // Descending order retains the low ids.
    {
        const std::vector<SubgroupId> order = {5, 4, 3, 2, 1, 0};
        DestinationPlan plan(order, CachePlan{2}, B);
        CHECK(plan.assign_storage_tier(0).host_retain);
        CHECK(plan.assign_storage_tier(1).host_retain);
        CHECK_FALSE(plan.assign_storage_tier(5).host_retain);
    }

    CHECK_THROWS_AS(DestinationPlan({}, CachePlan{0}, B).assign_storage_tier(9), Error);
}
