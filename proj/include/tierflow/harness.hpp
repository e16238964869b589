// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "tierflow/common.hpp"
#include "tierflow/config.hpp"
#include "tierflow/report.hpp"
#include "tierflow/scheduler.hpp"
#include "tierflow/tier.hpp"
#include "tierflow/trace.hpp"

namespace tierflow {

// Benchmark driver: builds tiers and workers from a RunConfig and runs the
// iteration loop (forward stub -> backward simulation -> update phase),
// producing per-iteration reports, aggregate means and the full event trace.
//
// Workers default to threads in one process; a non-negative worker_rank
// restricts this instance to that shard (one worker) so that real OS
// processes can each run a shard against shared directory tiers — the
// multiprocess mode the CLI orchestrates.
class BenchRunner {
public:
    explicit BenchRunner(RunConfig cfg, int worker_rank = -1)
        : cfg_(std::move(cfg)), rank_(worker_rank) {
        cfg_.validate();
        build_tiers();
        build_workers();
    }

    // Test hooks, called on the driver thread.
    std::function<void(int iteration, BenchRunner&)> before_iteration;
    std::function<void(int iteration, BenchRunner&)> after_backward;

    RunSummary run() {
        preflight_capacity();
        const std::uint64_t seed = cfg_.run.seed;
        for (auto& w : workers_) w->init_and_flush_all(seed);
        const SyntheticGradSource grads{seed};

        RunSummary summary;
        summary.mode = cfg_.run.mode;
        summary.iterations = cfg_.run.iterations;
        summary.warmup_iterations = cfg_.run.warmup_iterations;
        summary.subgroups = cfg_.subgroup_count();
        summary.workers = rank_ >= 0 ? 1 : cfg_.schedule.workers_per_node;
        summary.total_params = cfg_.model.total_params;
        summary.subgroup_param_count = cfg_.model.subgroup_param_count;
        summary.seed = seed;

        for (int iter = 0; iter < cfg_.run.iterations; ++iter) {
            if (before_iteration) before_iteration(iter, *this);
            summary.iters.push_back(run_iteration(iter, grads));
        }
        summary.compute_aggregates();
        return summary;
    }

    EventTrace& trace() { return trace_; }
    std::vector<std::shared_ptr<Tier>>& tiers() { return tiers_; }
    OffloadWorker& worker(std::size_t i) { return *workers_.at(i); }
    std::size_t worker_count() const { return workers_.size(); }
    const RunConfig& config() const { return cfg_; }

    void write_trace(const std::filesystem::path& path) const {
        if (path.has_parent_path()) {
            std::error_code ec;
            std::filesystem::create_directories(path.parent_path(), ec);
        }
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw IoError("cannot write trace to " + path.string());
        const auto events = trace_.snapshot();
        if (path.extension() == ".jsonl")
            EventTrace::write_jsonl(out, events);
        else
            EventTrace::write_csv(out, events);
    }

private:
    void build_tiers() {
        TierId id = 0;
        for (const auto& tc : cfg_.tiers) {
            TierSpec spec;
            spec.tier_id = id++;
            spec.kind = tc.kind;
            spec.root = tc.root;
            spec.read_bw = tc.read_mb_s * 1e6;
            spec.write_bw = tc.write_mb_s * 1e6;
            spec.io_parallelism = tc.io_parallelism;
            spec.persistent = tc.persistent;
            auto tier = std::make_shared<Tier>(spec);
            if (tc.kind != TierKind::mem_throttled && (tc.probe || tc.read_mb_s <= 0)) {
                tier->probe_bandwidth(
                    static_cast<std::uint64_t>(tc.probe_mib * 1024.0 * 1024.0), tc.probe_reps);
            }
            tiers_.push_back(std::move(tier));
        }
    }

    void build_workers() {
        const int M = cfg_.subgroup_count();
        const int world = cfg_.schedule.workers_per_node;
        const auto opts = cfg_.schedule_options();
        auto make_worker = [&](int w) {
            auto worker = std::make_unique<OffloadWorker>(w, tiers_, opts, cfg_.optim, trace_);
            worker->set_alpha(cfg_.placement.alpha);
            if (!cfg_.placement.ratio.empty()) worker->set_fixed_ratio(cfg_.placement.ratio);
            const int base = M / world;
            const int rem = M % world;
            const int begin = w * base + std::min(w, rem);
            const int count = base + (w < rem ? 1 : 0);
            for (int k = 0; k < count; ++k) {
                const int sg = begin + k;
                worker->add_subgroup(static_cast<SubgroupId>(sg), cfg_.subgroup_params(sg));
            }
            return worker;
        };
        if (rank_ >= 0) {
            if (rank_ >= world) throw ConfigError("worker rank out of range");
            workers_.push_back(make_worker(rank_));
        } else {
            for (int w = 0; w < world; ++w) workers_.push_back(make_worker(w));
        }
    }

    void preflight_capacity() {
        std::uint64_t needed = 0;
        const bool grads_on_disk = !cfg_.schedule_options().skip_gradients;
        for (auto& w : workers_)
            for (const SubgroupId id : w->subgroup_ids()) {
                const std::uint64_t pc = w->meta(id).param_count;
                needed += 12 * pc + (grads_on_disk ? 4 * pc : 0);
            }
        for (const auto& tier : tiers_) {
            if (tier->available_bytes() < needed + needed / 16)
                throw ConfigError("tier " + std::to_string(tier->id()) +
                                  ": insufficient capacity for " + std::to_string(needed) +
                                  " bytes of offloaded state");
        }
    }

    template <typename Fn>
    void parallel_workers(Fn&& fn) {
        if (workers_.size() == 1) {
            fn(0);
            return;
        }
        std::vector<std::thread> threads;
        std::exception_ptr err;
        std::mutex err_mu;
        for (std::size_t w = 0; w < workers_.size(); ++w) {
            threads.emplace_back([&, w] {
                try {
                    fn(w);
                } catch (...) {
                    std::lock_guard<std::mutex> g(err_mu);
                    if (!err) err = std::current_exception();
                }
            });
        }
        for (auto& t : threads) t.join();
        if (err) std::rethrow_exception(err);
    }

    struct TierByteWindow {
        std::vector<std::uint64_t> read_bytes;
        std::vector<std::uint64_t> write_bytes;
    };

    TierByteWindow bytes_in_window(std::size_t begin_index) const {
        TierByteWindow w;
        w.read_bytes.assign(tiers_.size(), 0);
        w.write_bytes.assign(tiers_.size(), 0);
        for (const Event& e : trace_.snapshot_from(begin_index)) {
            if (e.tier_id < 0 || static_cast<std::size_t>(e.tier_id) >= tiers_.size()) continue;
            if (e.kind == EventKind::prefetch_end)
                w.read_bytes[static_cast<std::size_t>(e.tier_id)] += e.bytes;
            else if (e.kind == EventKind::flush_end)
                w.write_bytes[static_cast<std::size_t>(e.tier_id)] += e.bytes;
        }
        return w;
    }

    IterationReport run_iteration(int iter, const SyntheticGradSource& grads) {
        IterationReport r;
        r.iteration = iter;
        r.warmup = iter < cfg_.run.warmup_iterations;

        // Forward pass stub: the paper-scale forward is a rounding error of
        // the iteration; only its wall time matters here.
        const auto f0 = std::chrono::steady_clock::now();
        if (cfg_.run.forward_stub_ms > 0.0)
            std::this_thread::sleep_for(
                std::chrono::duration<double, std::milli>(cfg_.run.forward_stub_ms));
        r.forward_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - f0).count();

        const std::size_t backward_mark = trace_.size();
        const auto b0 = std::chrono::steady_clock::now();
        parallel_workers([&](std::size_t w) {
            workers_[w]->run_backward_sim(iter, grads, cfg_.run.grad_accum_steps);
        });
        r.backward_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - b0).count();
        const auto bw_bytes = bytes_in_window(backward_mark);
        r.backward_write_bytes = bw_bytes.write_bytes;

        if (after_backward) after_backward(iter, *this);

        bool finite = true;
        for (auto& w : workers_) finite = finite && w->gradients_finite();
        if (!finite) {
            // Standard loss-scaling practice: skip the step, report it.
            r.skipped = true;
            r.overflow_count = 1;
            fill_distribution(r);
            r.update_read_bytes.assign(tiers_.size(), 0);
            r.update_write_bytes.assign(tiers_.size(), 0);
            return r;
        }

        const std::size_t update_mark = trace_.size();
        std::vector<PhaseStats> stats(workers_.size());
        const auto u0 = std::chrono::steady_clock::now();
        parallel_workers([&](std::size_t w) { stats[w] = workers_[w]->run_update(iter); });
        r.update_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - u0).count();
        const auto up_bytes = bytes_in_window(update_mark);
        r.update_read_bytes = up_bytes.read_bytes;
        r.update_write_bytes = up_bytes.write_bytes;

        std::uint64_t params = 0;
        std::vector<SubgroupIoTimes> all_io;
        r.flush_allocation.assign(tiers_.size(), 0);
        for (const auto& s : stats) {
            params += s.params_updated;
            r.cache_hits += s.cache_hits;
            r.overflow_count += s.downscale_overflows;
            r.retained += s.retained;
            for (std::size_t t = 0; t < s.flush_allocation.size() && t < tiers_.size(); ++t)
                r.flush_allocation[t] += s.flush_allocation[t];
            all_io.insert(all_io.end(), s.subgroup_io.begin(), s.subgroup_io.end());
        }
        r.update_throughput_mparams = update_throughput_mparams(params, r.update_s);
        r.effective_io_bps = effective_io_throughput(all_io);
        fill_distribution(r);
        return r;
    }

    void fill_distribution(IterationReport& r) {
        std::uint64_t host = 0, total = 0;
        std::vector<std::uint64_t> per_tier(tiers_.size(), 0);
        for (auto& w : workers_) {
            const auto [h, t] = w->residency_census();
            host += h;
            for (std::size_t i = 0; i < t.size(); ++i) per_tier[i] += t[i];
            total += w->total_params();
        }
        r.host_pct = total > 0 ? 100.0 * static_cast<double>(host) / static_cast<double>(total) : 0.0;
        r.tier_pct.assign(tiers_.size(), 0.0);
        for (std::size_t i = 0; i < per_tier.size(); ++i)
            r.tier_pct[i] =
                total > 0 ? 100.0 * static_cast<double>(per_tier[i]) / static_cast<double>(total)
                          : 0.0;
    }

    RunConfig cfg_;
    int rank_;
    EventTrace trace_;
    std::vector<std::shared_ptr<Tier>> tiers_;
    std::vector<std::unique_ptr<OffloadWorker>> workers_;
};

}  // namespace tierflow
