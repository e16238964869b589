// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tierflow/common.hpp"
#include "tierflow/optimizer.hpp"
#include "tierflow/placement.hpp"
#include "tierflow/pool.hpp"
#include "tierflow/precision.hpp"
#include "tierflow/tier.hpp"
#include "tierflow/tier_lock.hpp"
#include "tierflow/trace.hpp"

namespace tierflow {

struct ScheduleOptions {
    int pool_slots = 4;
    int cache_slots = -1;  // host-retention capacity C; -1 derives pool_slots - 3
    bool enable_caching = true;   // alternating order + host retention
    bool skip_gradients = true;   // delayed f16->f32 conversion at update time
    bool atomic_rw = true;        // node-level tier locks around transfers
    bool multi_path = true;       // place across all tiers vs. tier 0 only
    std::filesystem::path lock_dir;
    int update_threads = 1;
    double deadlock_timeout_s = 30.0;
    std::uint64_t update_pad_ns = 0;  // synthetic extra compute per subgroup update

    int retention_capacity(int subgroup_count) const {
        if (!enable_caching) return 0;
        const int budget = pool_slots - 3;  // pipeline keeps three slots circulating
        const int wanted = cache_slots < 0 ? budget : std::min(cache_slots, budget);
        return std::clamp(wanted, 0, subgroup_count);
    }
};

// Per-iteration processing order: ascending subgroup ids on even iterations,
// descending on odd ones (the first iteration is 0 and ascending). Without
// caching the order is ascending every time.
struct UpdatePlan {
    int iteration = 0;
    bool ascending = true;
    std::vector<SubgroupId> order;

    static UpdatePlan make(int iteration, std::vector<SubgroupId> sorted_ids, bool alternate) {
        UpdatePlan p;
        p.iteration = iteration;
        p.ascending = !alternate || (iteration % 2 == 0);
        p.order = std::move(sorted_ids);
        if (!p.ascending) std::reverse(p.order.begin(), p.order.end());
        return p;
    }

    std::optional<SubgroupId> next_after(SubgroupId id) const {
        for (std::size_t k = 0; k + 1 < order.size(); ++k)
            if (order[k] == id) return order[k + 1];
        return std::nullopt;
    }
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Seeded deterministic gradient generator standing in for real backward
// passes: same seed, same values, in every mode and on every run.
struct SyntheticGradSource {
    std::uint64_t seed = 42;

    f16 sample(SubgroupId sg, int iteration, int step, std::uint64_t index) const {
        std::uint64_t x = splitmix64(seed ^ 0xC2B2AE3D27D4EB4FULL);
        x = splitmix64(x ^ sg);
        x = splitmix64(x ^ static_cast<std::uint64_t>(iteration));
        x = splitmix64(x ^ static_cast<std::uint64_t>(step));
        x = splitmix64(x ^ index);
        const double u = static_cast<double>(x >> 11) * 0x1.0p-53;  // [0, 1)
        return f32_to_f16(static_cast<float>((u - 0.5) * 0.5));     // [-0.25, 0.25)
    }

    void fill(SubgroupId sg, int iteration, int step, std::span<f16> out) const {
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = sample(sg, iteration, step, i);
    }
};

inline float synthetic_param_init(std::uint64_t seed, SubgroupId sg, std::uint64_t index) {
    std::uint64_t x = splitmix64(seed ^ 0xA0761D6478BD642FULL);
    x = splitmix64(x ^ sg);
    x = splitmix64(x ^ index);
    const double u = static_cast<double>(x >> 11) * 0x1.0p-53;
    return static_cast<float>((u - 0.5) * 0.2);  // [-0.1, 0.1)
}

// Per-subgroup transfer timing collected during one update phase, input to
// the effective-I/O metric 2*size/(t_read + t_write).
struct SubgroupIoTimes {
    SubgroupId id = 0;
    std::uint64_t state_bytes = 0;
    double read_seconds = 0.0;
    double write_seconds = 0.0;
    bool fetched = false;
    bool flushed = false;
};

struct PhaseStats {
    double wall_seconds = 0.0;
    std::uint64_t params_updated = 0;
    std::uint64_t cache_hits = 0;
    std::uint64_t downscale_overflows = 0;
    int retained = 0;
    std::vector<int> flush_allocation;  // per-tier flush quota realized this phase
    std::vector<TierObservation> tier_obs;
    std::vector<SubgroupIoTimes> subgroup_io;
};

// ---------------------------------------------------------------------------
// One background I/O thread per (worker, tier). Pending prefetches drain
// before pending flushes: prefetches sit on the critical path of the next
// update while flushes are lazy. Each executed job acquires the node-level
// tier lock (when atomic_rw is on), so a queued operation may visibly defer
// until a competing worker's lock_release. Completion callbacks run before
// the job's future is fulfilled.

class TierIoWorker {
public:
    using Completion = std::function<void(bool ok, const IoStats&)>;

    TierIoWorker(std::shared_ptr<Tier> tier, WorkerId worker, bool use_lock,
                 std::filesystem::path lock_dir, EventTrace* trace)
        : tier_(std::move(tier)),
          worker_(worker),
          use_lock_(use_lock),
          lock_dir_(std::move(lock_dir)),
          trace_(trace),
          thread_([this] { run(); }) {}

    ~TierIoWorker() { shutdown(); }

    TierIoWorker(const TierIoWorker&) = delete;
    TierIoWorker& operator=(const TierIoWorker&) = delete;

    std::future<IoStats> submit(bool is_prefetch, std::int64_t sg, std::uint64_t bytes_hint,
                                std::function<IoStats()> transfer, Completion completion) {
        Job job;
        job.is_prefetch = is_prefetch;
        job.sg = sg;
        job.bytes_hint = bytes_hint;
        job.transfer = std::move(transfer);
        job.completion = std::move(completion);
        std::future<IoStats> fut = job.promise.get_future();
        {
            std::lock_guard<std::mutex> g(mu_);
            if (stop_) throw Error("tier I/O queue is shut down");
            (is_prefetch ? prefetch_q_ : flush_q_).push_back(std::move(job));
        }
        cv_.notify_one();
        return fut;
    }

    void shutdown() {
        {
            std::lock_guard<std::mutex> g(mu_);
            if (stop_) return;
            stop_ = true;
        }
        cv_.notify_all();
        if (thread_.joinable()) thread_.join();
        std::deque<Job> leftovers;
        {
            std::lock_guard<std::mutex> g(mu_);
            leftovers.swap(prefetch_q_);
            for (auto& j : flush_q_) leftovers.push_back(std::move(j));
            flush_q_.clear();
        }
        for (auto& j : leftovers) {
            if (j.completion) j.completion(false, IoStats{});
            j.promise.set_exception(
                std::make_exception_ptr(Error("tier I/O queue shut down, operation cancelled")));
        }
    }

    TierId tier_id() const { return tier_->id(); }

private:
    struct Job {
        bool is_prefetch = false;
        std::int64_t sg = -1;
        std::uint64_t bytes_hint = 0;
        std::function<IoStats()> transfer;
        Completion completion;
        std::promise<IoStats> promise;
    };

    void run() {
        for (;;) {
            Job job;
            {
                std::unique_lock<std::mutex> l(mu_);
                cv_.wait(l, [&] { return stop_ || !prefetch_q_.empty() || !flush_q_.empty(); });
                if (prefetch_q_.empty() && flush_q_.empty()) {
                    if (stop_) return;
                    continue;
                }
                auto& q = prefetch_q_.empty() ? flush_q_ : prefetch_q_;
                job = std::move(q.front());
                q.pop_front();
            }
            execute(job);
        }
    }

    void execute(Job& job) {
        const EventKind start = job.is_prefetch ? EventKind::prefetch_start : EventKind::flush_start;
        const EventKind end = job.is_prefetch ? EventKind::prefetch_end : EventKind::flush_end;
        std::optional<TierLockGuard> guard;
        try {
            if (use_lock_) guard.emplace(lock_dir_, tier_->id(), worker_, trace_);
            const std::int64_t t_start = now_ns();
            if (trace_) trace_->append({t_start, worker_, start, job.sg, tier_->id(), job.bytes_hint});
            IoStats stats = job.transfer();
            const std::int64_t t_end = now_ns();
            if (trace_) trace_->append({t_end, worker_, end, job.sg, tier_->id(), stats.bytes});
            // Metrics and the trace must agree exactly: the duration that
            // feeds the effective-I/O formula is the traced interval.
            stats.seconds = static_cast<double>(t_end - t_start) / 1e9;
            guard.reset();
            if (job.completion) job.completion(true, stats);
            job.promise.set_value(stats);
        } catch (...) {
            if (trace_) trace_->record(end, worker_, job.sg, tier_->id(), 0);
            guard.reset();
            if (job.completion) job.completion(false, IoStats{});
            job.promise.set_exception(std::current_exception());
        }
    }

    std::shared_ptr<Tier> tier_;
    WorkerId worker_;
    bool use_lock_;
    std::filesystem::path lock_dir_;
    EventTrace* trace_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Job> prefetch_q_;
    std::deque<Job> flush_q_;
    bool stop_ = false;
    std::thread thread_;
};

// ---------------------------------------------------------------------------
// One worker's offloading pipeline. The coordinator (the thread calling
// run_update) drives the update loop; per-tier I/O threads execute transfers
// under tier locks; the update kernel fans out over compute threads. A
// subgroup's buffers are accessed by exactly one context at a time, tracked
// by the pool's slot states.
//
// run_update realizes the overlapped schedule: a prefetch frontier keeps as
// many upcoming subgroups in flight as free slots allow (the slot credit is
// reserved before the prefetch is queued, so flushes can always drain and
// the pool cannot wedge), each subgroup is updated exactly once in plan
// order, and updated subgroups are either retained in host memory (the last
// C of the order) or lazily flushed to the tier the destination plan picked.
// The frontier fetches the next not-yet-queued subgroup from its own current
// tier; when consecutive subgroups share an origin this is a one-ahead
// prefetch on that tier, and at phase start it primes the pipeline so the
// first updates have transfers to overlap with.

class OffloadWorker {
public:
    OffloadWorker(WorkerId id, std::vector<std::shared_ptr<Tier>> tiers, ScheduleOptions opt,
                  AdamHyper hyper, EventTrace& trace)
        : id_(id), tiers_(std::move(tiers)), opt_(std::move(opt)), hyper_(hyper), trace_(trace) {
        if (tiers_.empty()) throw ConfigError("offload worker needs at least one tier");
        hyper_.validate();
        if (opt_.lock_dir.empty())
            opt_.lock_dir = std::filesystem::temp_directory_path() / "tierflow-locks";
        std::vector<double> rbw, wbw;
        for (const auto& t : tiers_) {
            rbw.push_back(t->spec().read_bw);
            wbw.push_back(t->spec().write_bw);
        }
        est_ = BandwidthEstimate::init(rbw, wbw, est_.alpha);
        for (const auto& t : tiers_)
            io_.push_back(
                std::make_unique<TierIoWorker>(t, id_, opt_.atomic_rw, opt_.lock_dir, &trace_));
    }

    ~OffloadWorker() {
        for (auto& w : io_) w->shutdown();
    }

    OffloadWorker(const OffloadWorker&) = delete;
    OffloadWorker& operator=(const OffloadWorker&) = delete;

    WorkerId id() const { return id_; }

    void set_alpha(double alpha) {
        if (!(alpha > 0.0) || alpha > 1.0) throw ConfigError("placement.alpha must be in (0, 1]");
        est_.alpha = alpha;
    }

    // Forces a fixed placement split (config placement.ratio), bypassing the
    // bandwidth model and its re-estimation.
    void set_fixed_ratio(std::vector<double> ratio) { fixed_ratio_ = std::move(ratio); }

    void add_subgroup(SubgroupId id, std::uint64_t param_count) {
        if (pool_) throw Error("add_subgroup after pipeline initialization");
        if (param_count == 0) throw ConfigError("subgroup param_count must be > 0");
        Subgroup sg;
        sg.id = id;
        sg.param_count = param_count;
        subgroups_.emplace(id, sg);
        ids_.push_back(id);
        grad_bufs_.emplace(id, GradBufferF16(id, param_count));
        max_params_ = std::max(max_params_, param_count);
    }

    // Creates the initial FP32 states host-side (seeded params, zero moments)
    // and flushes everything to the tiers Eq. 1 picks; all subgroups end up
    // on_tier, so the first update phase starts with zero cache hits.
    void init_and_flush_all(std::uint64_t seed) {
        if (ids_.empty()) throw ConfigError("worker has no subgroups");
        std::sort(ids_.begin(), ids_.end());
        pool_ = std::make_unique<HostBufferPool>(opt_.pool_slots, max_params_);
        shadow_.resize(max_params_);
        grad_scratch_f16_.resize(max_params_);
        grad_scratch_f32_.resize(max_params_);

        const auto plan = UpdatePlan::make(0, ids_, false);
        DestinationPlan dests(plan.order, CachePlan{0}, placement_bandwidths());
        std::vector<float> scratch;
        for (const SubgroupId id : plan.order) {
            Subgroup& sg = subgroups_.at(id);
            scratch.assign(3 * sg.param_count, 0.0f);
            for (std::uint64_t i = 0; i < sg.param_count; ++i)
                scratch[i] = synthetic_param_init(seed, id, i);
            const TierAssignment a = dests.assign_storage_tier(id);
            sg.begin_flush();
            tiers_[static_cast<std::size_t>(a.tier)]->write_subgroup(id, sg.param_count, scratch);
            sg.finish_flush(a.tier);
        }
    }

    // Backward simulation: accumulate seeded FP16 gradients host-side; with
    // delayed conversion off, additionally upscale to FP32 and flush the
    // gradients to each subgroup's tier (the ZeRO-3 data flow).
    void run_backward_sim(int iteration, const SyntheticGradSource& source, int accum_steps) {
        if (accum_steps < 1) throw ConfigError("grad_accum_steps must be >= 1");
        std::vector<std::future<IoStats>> pending;
        for (const SubgroupId id : ids_) {
            Subgroup& sg = subgroups_.at(id);
            GradBufferF16& buf = grad_bufs_.at(id);
            buf.reset();
            std::span<f16> scratch(grad_scratch_f16_.data(), sg.param_count);
            for (int step = 0; step < accum_steps; ++step) {
                source.fill(id, iteration, step, scratch);
                buf.accumulate(scratch);
            }
            if (opt_.skip_gradients) continue;

            const std::uint64_t pc = sg.param_count;
            trace_.record(EventKind::grad_upscale_start, id_, id, kNoTier, 4 * pc);
            auto grads32 = std::make_shared<std::vector<float>>(pc);
            upscale_f16_to_f32(buf.values(), *grads32);
            trace_.record(EventKind::grad_upscale_end, id_, id, kNoTier, 4 * pc);

            const TierId dest = sg.residency == Residency::on_tier ? sg.tier : 0;
            grad_tier_[id] = dest;
            auto tier = tiers_[static_cast<std::size_t>(dest)];
            pending.push_back(io_[static_cast<std::size_t>(dest)]->submit(
                /*is_prefetch=*/false, id, 4 * pc,
                [tier, id, pc, grads32] { return tier->write_grads(id, pc, *grads32); }, nullptr));
        }
        for (auto& fut : pending) watchdog_wait(fut);
    }

    bool gradients_finite() const {
        for (const auto& [id, buf] : grad_bufs_)
            if (!buf.finite()) return false;
        return true;
    }

    GradBufferF16& grad_buffer(SubgroupId id) { return grad_bufs_.at(id); }

    // Algorithm core: one overlapped update phase. Every subgroup is updated
    // exactly once with Adam timestep iteration+1.
    PhaseStats run_update(int iteration) {
        if (!pool_) throw Error("run_update before init_and_flush_all");
        const auto t0 = std::chrono::steady_clock::now();

        PhaseStats stats;
        stats.tier_obs.assign(tiers_.size(), TierObservation{});
        std::vector<SubgroupId> order;
        {
            std::lock_guard<std::mutex> g(mu_);
            plan_ = UpdatePlan::make(iteration, ids_, opt_.enable_caching);
            const int cap = opt_.retention_capacity(static_cast<int>(ids_.size()));
            dests_ = std::make_unique<DestinationPlan>(plan_.order, CachePlan{cap},
                                                       placement_bandwidths());
            stats.retained = dests_->retained_count();
            stats.flush_allocation = dests_->flush_allocation().counts;
            frontier_ = 0;
            prefetch_futures_.clear();
            flush_futures_.clear();
            cache_hits_this_phase_ = 0;
            phase_stats_ = &stats;
            order = plan_.order;
            pump_locked();
        }

        const int threads = opt_.update_threads > 0
                                ? opt_.update_threads
                                : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
        try {
            run_update_loop(iteration, order, threads, stats);
        } catch (...) {
            std::lock_guard<std::mutex> g(mu_);
            phase_stats_ = nullptr;  // stats is about to go out of scope
            throw;
        }

        {
            std::lock_guard<std::mutex> g(mu_);
            phase_stats_ = nullptr;
            stats.cache_hits = cache_hits_this_phase_;
            prefetch_futures_.clear();  // all settled; stale entries would
            flush_futures_.clear();     // confuse op-level calls between phases
        }
        stats.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        if (fixed_ratio_.empty()) update_bandwidth_estimates(est_, stats.tier_obs);
        return stats;
    }

private:
    void run_update_loop(int iteration, const std::vector<SubgroupId>& order, int threads,
                         PhaseStats& stats) {
        for (const SubgroupId id : order) {
            Subgroup& sg = subgroups_.at(id);
            const std::uint64_t pc = sg.param_count;
            const int slot = wait_host_resident(id);

            std::span<float> grads32;
            if (opt_.skip_gradients) {
                GradBufferF16& buf = grad_bufs_.at(id);
                trace_.record(EventKind::grad_upscale_start, id_, id, kNoTier, 4 * pc);
                grads32 = std::span<float>(grad_scratch_f32_.data(), pc);
                const bool finite = upscale_f16_to_f32(buf.values(), grads32);
                trace_.record(EventKind::grad_upscale_end, id_, id, kNoTier, 4 * pc);
                if (!finite)
                    throw GradientOverflowError("subgroup " + std::to_string(id) +
                                                ": non-finite gradients reached the update phase");
            } else {
                grads32 = pool_->grad_span(slot, pc);  // fetched from storage
            }

            pool_->begin_update(slot);
            trace_.record(EventKind::update_start, id_, id, kNoTier, 12 * pc);
            StateView view = StateView::from_contiguous(pool_->state_span(slot, pc), pc);
            adam_step(view, grads32, hyper_, static_cast<std::uint64_t>(iteration) + 1, threads);
            if (opt_.update_pad_ns > 0)
                std::this_thread::sleep_for(std::chrono::nanoseconds(opt_.update_pad_ns));
            sg.step_count = static_cast<std::uint64_t>(iteration) + 1;
            stats.params_updated += pc;
            trace_.record(EventKind::update_end, id_, id, kNoTier, 12 * pc);
            pool_->end_update(slot);

            // Downscaled FP16 params for the device shadow (traced no-op copy).
            trace_.record(EventKind::h2d_start, id_, id, kNoTier, 2 * pc);
            stats.downscale_overflows +=
                downscale_f32_to_f16(view.params, std::span<f16>(shadow_.data(), pc));
            trace_.record(EventKind::h2d_end, id_, id, kNoTier, 2 * pc);

            const TierAssignment a = dests_->assign_storage_tier(id);
            std::lock_guard<std::mutex> g(mu_);
            if (!a.host_retain) start_flush_locked(id, a.tier, slot);
            pump_locked();
        }

        // Lazy flushes drain off the critical path of updates, but the phase
        // is only done once residency is consistent again.
        std::vector<std::pair<SubgroupId, std::shared_future<IoStats>>> pending;
        {
            std::lock_guard<std::mutex> g(mu_);
            pending = flush_futures_;
        }
        for (auto& [fid, fut] : pending) watchdog_wait(fut);
    }

public:
    // Blocks until the subgroup's state is host-resident and returns its pool
    // slot. Host-cached subgroups return immediately (a recorded cache hit);
    // an in-flight prefetch is awaited for its residual time only; a subgroup
    // never enqueued is fetched synchronously (degraded but correct).
    int wait_host_resident(SubgroupId id) {
        std::shared_future<IoStats> fut;
        bool need_grad_fetch = false;
        {
            std::unique_lock<std::mutex> l(mu_);
            // Re-examine after every pool wait: a flush-completion pump may
            // have enqueued this very prefetch while the lock was dropped.
            for (;;) {
                Subgroup& sg = subgroups_.at(id);
                auto it = prefetch_futures_.find(id);
                if (it != prefetch_futures_.end()) {
                    fut = it->second;
                    break;
                }
                if (sg.residency == Residency::host_cached) {
                    ++cache_hits_this_phase_;
                    trace_.record(EventKind::cache_hit, id_, id, kNoTier, 0);
                    need_grad_fetch = !opt_.skip_gradients && grad_tier_.count(id) != 0;
                    break;
                }
                const int slot = pool_->try_reserve(id);
                if (slot >= 0) {
                    fut = start_prefetch_locked(id, slot);
                    break;
                }
                l.unlock();
                wait_pool_free();
                l.lock();
            }
        }
        if (fut.valid()) watchdog_wait(fut);  // rethrows tier errors

        if (need_grad_fetch) fetch_grads_for_cached(id);
        std::lock_guard<std::mutex> g(mu_);
        return subgroups_.at(id).slot;
    }

    // Queues an asynchronous flush of a host-resident, updated subgroup to
    // `dest`. Exposed for op-level tests; run_update uses the same path.
    std::shared_future<IoStats> enqueue_flush(SubgroupId id, TierId dest) {
        std::lock_guard<std::mutex> g(mu_);
        Subgroup& sg = subgroups_.at(id);
        if (sg.residency != Residency::host_cached || sg.slot < 0)
            throw Error("enqueue_flush: subgroup not host-resident");
        return start_flush_locked(id, dest, sg.slot);
    }

    // Queues an asynchronous prefetch from the subgroup's current tier.
    // A host-retained subgroup is a no-op cache hit.
    std::optional<std::shared_future<IoStats>> enqueue_prefetch(SubgroupId id) {
        std::unique_lock<std::mutex> l(mu_);
        for (;;) {
            Subgroup& sg = subgroups_.at(id);
            auto it = prefetch_futures_.find(id);
            if (it != prefetch_futures_.end()) return it->second;
            if (sg.residency == Residency::host_cached) {
                trace_.record(EventKind::cache_hit, id_, id, kNoTier, 0);
                ++cache_hits_this_phase_;
                return std::nullopt;
            }
            const int slot = pool_->try_reserve(id);
            if (slot >= 0) return start_prefetch_locked(id, slot);
            l.unlock();
            wait_pool_free();
            l.lock();
        }
    }

    const UpdatePlan& current_plan() const { return plan_; }
    const BandwidthEstimate& estimates() const { return est_; }
    const ScheduleOptions& options() const { return opt_; }
    HostBufferPool& pool() { return *pool_; }
    const std::vector<SubgroupId>& subgroup_ids() const { return ids_; }
    const Subgroup& meta(SubgroupId id) const { return subgroups_.at(id); }

    std::uint64_t total_params() const {
        std::uint64_t n = 0;
        for (const auto& [id, sg] : subgroups_) n += sg.param_count;
        return n;
    }

    // Residency census for the distribution metric: params host-resident and
    // params per tier.
    std::pair<std::uint64_t, std::vector<std::uint64_t>> residency_census() const {
        std::uint64_t host = 0;
        std::vector<std::uint64_t> per_tier(tiers_.size(), 0);
        for (const auto& [id, sg] : subgroups_) {
            if (sg.residency == Residency::host_cached)
                host += sg.param_count;
            else if (sg.residency == Residency::on_tier)
                per_tier[static_cast<std::size_t>(sg.tier)] += sg.param_count;
        }
        return {host, per_tier};
    }

    // Test/verification helper: a copy of the subgroup's current state, read
    // from wherever it lives (bypasses the pipeline; costs tier time).
    std::vector<float> read_current_state(SubgroupId id) {
        Residency res;
        TierId tier;
        int slot;
        std::uint64_t pc;
        {
            std::lock_guard<std::mutex> g(mu_);
            const Subgroup& sg = subgroups_.at(id);
            res = sg.residency;
            tier = sg.tier;
            slot = sg.slot;
            pc = sg.param_count;
            if (res == Residency::host_cached) {
                auto span = pool_->state_span(slot, pc);
                return std::vector<float>(span.begin(), span.end());
            }
        }
        if (res != Residency::on_tier) throw Error("read_current_state: subgroup is in flight");
        std::vector<float> out(3 * pc);
        tiers_[static_cast<std::size_t>(tier)]->read_subgroup(id, pc, out);
        return out;
    }

private:
    std::vector<double> placement_bandwidths() const {
        std::vector<double> b = fixed_ratio_.empty() ? est_.effective_all() : fixed_ratio_;
        b.resize(tiers_.size(), 0.0);
        if (!opt_.multi_path)
            for (std::size_t i = 1; i < b.size(); ++i) b[i] = 0.0;
        return b;
    }

    // Keeps the prefetch frontier as deep as free slots allow. Called with
    // mu_ held, from the coordinator and from flush completions.
    void pump_locked() {
        while (frontier_ < plan_.order.size()) {
            const SubgroupId id = plan_.order[frontier_];
            Subgroup& sg = subgroups_.at(id);
            if (sg.residency == Residency::host_cached || prefetch_futures_.count(id) != 0 ||
                sg.residency == Residency::in_flight) {
                ++frontier_;
                continue;
            }
            const int slot = pool_->try_reserve(id);
            if (slot < 0) break;
            start_prefetch_locked(id, slot);
            ++frontier_;
        }
    }

    std::shared_future<IoStats> start_prefetch_locked(SubgroupId id, int slot) {
        Subgroup& sg = subgroups_.at(id);
        const TierId origin = sg.tier;
        sg.begin_prefetch();
        const std::uint64_t pc = sg.param_count;
        auto tier = tiers_[static_cast<std::size_t>(origin)];
        const bool fetch_grads = !opt_.skip_gradients && grad_tier_.count(id) != 0 &&
                                 grad_tier_.at(id) == origin;
        auto state_span = pool_->state_span(slot, pc);
        auto grad_span = pool_->grad_span(slot, pc);
        const std::uint64_t bytes_hint = 12 * pc + (fetch_grads ? 4 * pc : 0);

        auto transfer = [tier, id, pc, state_span, grad_span, fetch_grads] {
            IoStats st = tier->read_subgroup(id, pc, state_span);
            if (fetch_grads) {
                const IoStats gs = tier->read_grads(id, pc, grad_span);
                st.bytes += gs.bytes;
                st.seconds += gs.seconds;
            }
            return st;
        };
        auto completion = [this, id, slot, origin](bool ok, const IoStats& st) {
            std::lock_guard<std::mutex> g(mu_);
            Subgroup& sgc = subgroups_.at(id);
            if (ok) {
                sgc.finish_prefetch(slot);
                pool_->prefetch_done(slot);
                record_read_locked(id, origin, st, /*state_fetch=*/true);
            } else {
                sgc.residency = Residency::on_tier;  // fetch failed; still on the tier
                sgc.slot = -1;
                pool_->release_failed(slot);
            }
        };
        auto fut = io_[static_cast<std::size_t>(origin)]
                       ->submit(/*is_prefetch=*/true, id, bytes_hint, std::move(transfer),
                                std::move(completion))
                       .share();
        prefetch_futures_[id] = fut;
        return fut;
    }

    std::shared_future<IoStats> start_flush_locked(SubgroupId id, TierId dest, int slot) {
        if (dest < 0 || static_cast<std::size_t>(dest) >= tiers_.size())
            throw Error("flush destination out of range");
        Subgroup& sg = subgroups_.at(id);
        const TierId origin = sg.tier;  // may differ from dest when the allocation shifted
        sg.begin_flush();
        pool_->begin_flush(slot);
        const std::uint64_t pc = sg.param_count;
        auto tier = tiers_[static_cast<std::size_t>(dest)];
        auto state_span = pool_->state_span(slot, pc);

        auto transfer = [tier, id, pc, state_span] {
            return tier->write_subgroup(
                id, pc, std::span<const float>(state_span.data(), state_span.size()));
        };
        auto completion = [this, id, slot, dest, origin](bool ok, const IoStats& st) {
            std::shared_ptr<Tier> stale;
            {
                std::lock_guard<std::mutex> g(mu_);
                Subgroup& sgc = subgroups_.at(id);
                if (ok) {
                    sgc.finish_flush(dest);
                    pool_->flush_done(slot);
                    record_write_locked(id, dest, st, /*state_flush=*/true);
                    if (origin >= 0 && origin != dest)
                        stale = tiers_[static_cast<std::size_t>(origin)];
                    pump_locked();
                } else {
                    sgc.residency = Residency::host_cached;  // flush failed; still in host
                    pool_->flush_done(slot);
                }
            }
            if (stale) stale->remove_subgroup(id);
        };
        auto fut = io_[static_cast<std::size_t>(dest)]
                       ->submit(/*is_prefetch=*/false, id, 12 * pc, std::move(transfer),
                                std::move(completion))
                       .share();
        flush_futures_.emplace_back(id, fut);
        return fut;
    }

    // Storage gradient path for a host-retained subgroup: a grad-only fetch.
    void fetch_grads_for_cached(SubgroupId id) {
        TierId gt;
        std::uint64_t pc;
        int slot;
        {
            std::lock_guard<std::mutex> g(mu_);
            const Subgroup& sg = subgroups_.at(id);
            gt = grad_tier_.at(id);
            pc = sg.param_count;
            slot = sg.slot;
        }
        auto tier = tiers_[static_cast<std::size_t>(gt)];
        auto grad_span = pool_->grad_span(slot, pc);
        auto fut = io_[static_cast<std::size_t>(gt)]->submit(
            /*is_prefetch=*/true, id, 4 * pc,
            [tier, id, pc, grad_span] { return tier->read_grads(id, pc, grad_span); }, nullptr);
        const IoStats st = watchdog_wait_value(fut);
        std::lock_guard<std::mutex> g(mu_);
        record_read_locked(id, gt, st, /*state_fetch=*/false);
    }

    void record_read_locked(SubgroupId id, TierId tier, const IoStats& st, bool state_fetch) {
        if (phase_stats_ == nullptr) return;
        auto& obs = phase_stats_->tier_obs[static_cast<std::size_t>(tier)];
        obs.read_transfers += 1;
        obs.read_bytes += static_cast<double>(st.bytes);
        obs.read_seconds += st.seconds;
        auto& io = subgroup_io_entry_locked(id);
        io.read_seconds += st.seconds;
        if (state_fetch) io.fetched = true;
    }

    void record_write_locked(SubgroupId id, TierId tier, const IoStats& st, bool state_flush) {
        if (phase_stats_ == nullptr) return;
        auto& obs = phase_stats_->tier_obs[static_cast<std::size_t>(tier)];
        obs.write_transfers += 1;
        obs.write_bytes += static_cast<double>(st.bytes);
        obs.write_seconds += st.seconds;
        auto& io = subgroup_io_entry_locked(id);
        io.write_seconds += st.seconds;
        if (state_flush) io.flushed = true;
    }

    SubgroupIoTimes& subgroup_io_entry_locked(SubgroupId id) {
        for (auto& e : phase_stats_->subgroup_io)
            if (e.id == id) return e;
        SubgroupIoTimes e;
        e.id = id;
        e.state_bytes = 12 * subgroups_.at(id).param_count;
        phase_stats_->subgroup_io.push_back(e);
        return phase_stats_->subgroup_io.back();
    }

    void wait_pool_free() {
        const std::uint64_t start_progress = trace_.progress_count();
        auto waited = std::chrono::duration<double>(0);
        while (!pool_->wait_for_free(std::chrono::milliseconds(50))) {
            waited += std::chrono::duration<double>(0.05);
            if (trace_.progress_count() != start_progress) return;  // progress elsewhere
            if (waited.count() >= opt_.deadlock_timeout_s)
                throw SchedulingBugError("host buffer pool made no progress (all slots busy) for " +
                                         std::to_string(opt_.deadlock_timeout_s) + "s");
        }
    }

    template <typename FutureT>
    void watchdog_wait(FutureT& fut) {
        (void)watchdog_wait_value(fut);
    }

    template <typename FutureT>
    IoStats watchdog_wait_value(FutureT& fut) {
        std::uint64_t last = trace_.progress_count();
        auto stalled = std::chrono::duration<double>(0);
        while (fut.wait_for(std::chrono::milliseconds(50)) != std::future_status::ready) {
            const std::uint64_t now_p = trace_.progress_count();
            if (now_p != last) {
                last = now_p;
                stalled = std::chrono::duration<double>(0);
            } else {
                stalled += std::chrono::duration<double>(0.05);
                if (stalled.count() >= opt_.deadlock_timeout_s)
                    throw SchedulingBugError("pipeline made no trace progress for " +
                                             std::to_string(opt_.deadlock_timeout_s) + "s");
            }
        }
        return fut.get();
    }

    WorkerId id_;
    std::vector<std::shared_ptr<Tier>> tiers_;
    ScheduleOptions opt_;
    AdamHyper hyper_;
    EventTrace& trace_;

    std::vector<std::unique_ptr<TierIoWorker>> io_;
    std::unique_ptr<HostBufferPool> pool_;
    std::unordered_map<SubgroupId, Subgroup> subgroups_;
    std::unordered_map<SubgroupId, GradBufferF16> grad_bufs_;
    std::unordered_map<SubgroupId, TierId> grad_tier_;
    std::vector<SubgroupId> ids_;
    std::uint64_t max_params_ = 0;

    BandwidthEstimate est_;
    std::vector<double> fixed_ratio_;

    std::mutex mu_;
    UpdatePlan plan_;
    std::unique_ptr<DestinationPlan> dests_;
    std::size_t frontier_ = 0;
    std::unordered_map<SubgroupId, std::shared_future<IoStats>> prefetch_futures_;
    std::vector<std::pair<SubgroupId, std::shared_future<IoStats>>> flush_futures_;
    PhaseStats* phase_stats_ = nullptr;
    std::uint64_t cache_hits_this_phase_ = 0;

    std::vector<f16> shadow_;
    std::vector<f16> grad_scratch_f16_;
    std::vector<float> grad_scratch_f32_;
};

}  // namespace tierflow
