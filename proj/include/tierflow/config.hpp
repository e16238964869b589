// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "tierflow/common.hpp"
#include "tierflow/optimizer.hpp"
#include "tierflow/scheduler.hpp"
#include "tierflow/tier.hpp"

namespace tierflow {

struct TierConfig {
    TierKind kind = TierKind::local_dir;
    std::string root;
    double read_mb_s = 0.0;   // required for mem_throttled; optional for dirs
    double write_mb_s = 0.0;
    int io_parallelism = 1;
    bool persistent = false;
    bool probe = false;  // measure dir-tier bandwidth at startup
    double probe_mib = 8.0;
    int probe_reps = 3;
};

// Benchmark configuration. JSON on disk, sections: model, tiers[], placement,
// optim, schedule, run (plus optional ablation overrides).
struct RunConfig {
    struct Model {
        std::uint64_t total_params = 24ull * 2'796'202;  // 24 subgroups x ~32 MiB of state
        std::uint64_t subgroup_param_count = 2'796'202;
    } model;

    std::vector<TierConfig> tiers;

    struct Placement {
        double alpha = 0.5;
        std::vector<double> ratio;  // non-empty forces a fixed split, bypassing Eq. 1
    } placement;

    AdamHyper optim;

    struct Schedule {
        int pool_slots = 6;
        int cache_slots = -1;
        int workers_per_node = 1;
        std::string lock_dir;
        int update_threads = 0;  // 0 = hardware concurrency
        double deadlock_timeout_s = 30.0;
    } schedule;

    struct Run {
        int iterations = 10;
        int warmup_iterations = 2;
        int grad_accum_steps = 1;
        std::string mode = "engine";  // engine | baseline
        std::uint64_t seed = 42;
        double forward_stub_ms = 1.0;
        double update_pad_us = 0.0;  // per-subgroup synthetic update cost
    } run;

    // Ablation flags; unset means "follow the mode" (engine: all on,
    // baseline: all off).
    std::optional<bool> enable_caching;
    std::optional<bool> skip_gradients;
    std::optional<bool> atomic_rw;
    std::optional<bool> multi_path;

    int subgroup_count() const {
        return static_cast<int>((model.total_params + model.subgroup_param_count - 1) /
                                model.subgroup_param_count);
    }

    // Ragged last subgroup: the remainder of total_params.
    std::uint64_t subgroup_params(int index) const {
        const std::uint64_t begin =
            static_cast<std::uint64_t>(index) * model.subgroup_param_count;
        return std::min(model.subgroup_param_count, model.total_params - begin);
    }

    bool engine_mode() const { return run.mode == "engine"; }

    ScheduleOptions schedule_options() const {
        const bool base = engine_mode();
        ScheduleOptions o;
        o.pool_slots = schedule.pool_slots;
        o.cache_slots = schedule.cache_slots;
        o.enable_caching = enable_caching.value_or(base);
        o.skip_gradients = skip_gradients.value_or(base);
        o.atomic_rw = atomic_rw.value_or(base);
        o.multi_path = multi_path.value_or(base);
        o.update_threads = schedule.update_threads;
        o.deadlock_timeout_s = schedule.deadlock_timeout_s;
        o.update_pad_ns = static_cast<std::uint64_t>(run.update_pad_us * 1000.0);
        o.lock_dir = resolve_lock_dir();
        return o;
    }

    // Precedence: TIERFLOW_LOCK_DIR > config schedule.lock_dir > temp default.
    std::filesystem::path resolve_lock_dir() const {
        if (const char* env = std::getenv("TIERFLOW_LOCK_DIR"); env && *env) return env;
        if (!schedule.lock_dir.empty()) return schedule.lock_dir;
        return std::filesystem::temp_directory_path() / "tierflow-locks";
    }

    void validate() const {
        if (model.total_params == 0) throw ConfigError("model.total_params must be > 0");
        if (model.subgroup_param_count == 0)
            throw ConfigError("model.subgroup_param_count must be > 0");
        if (tiers.empty()) throw ConfigError("at least one tier is required");
        for (const auto& t : tiers) {
            if (t.kind == TierKind::mem_throttled && (t.read_mb_s <= 0 || t.write_mb_s <= 0))
                throw ConfigError("mem_throttled tiers need read/write rates");
            if (t.kind != TierKind::mem_throttled && t.root.empty())
                throw ConfigError("directory tiers need a root path");
            if (t.io_parallelism < 1) throw ConfigError("tier io_parallelism must be >= 1");
        }
        if (!placement.ratio.empty() && placement.ratio.size() != tiers.size())
            throw ConfigError("placement.ratio length must match the tier count");
        if (!(placement.alpha > 0.0) || placement.alpha > 1.0)
            throw ConfigError("placement.alpha must be in (0, 1]");
        optim.validate();
        if (schedule.pool_slots < 3) throw ConfigError("schedule.pool_slots must be >= 3");
        if (schedule.workers_per_node < 1) throw ConfigError("workers_per_node must be >= 1");
        if (run.iterations < 1) throw ConfigError("run.iterations must be >= 1");
        if (run.warmup_iterations < 0 || run.warmup_iterations >= run.iterations)
            throw ConfigError("warmup_iterations must be < iterations");
        if (run.grad_accum_steps < 1) throw ConfigError("grad_accum_steps must be >= 1");
        if (run.mode != "engine" && run.mode != "baseline")
            throw ConfigError("run.mode must be engine or baseline");
        if (subgroup_count() < schedule.workers_per_node)
            throw ConfigError("need at least one subgroup per worker");
    }

    static TierKind tier_kind_from_string(const std::string& s) {
        if (s == "local_dir") return TierKind::local_dir;
        if (s == "remote_dir") return TierKind::remote_dir;
        if (s == "mem_throttled") return TierKind::mem_throttled;
        throw ConfigError("unknown tier kind: " + s);
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        if (j.contains("model")) {
            const auto& m = j.at("model");
            c.model.total_params = m.value("total_params", c.model.total_params);
            c.model.subgroup_param_count =
                m.value("subgroup_param_count", c.model.subgroup_param_count);
        }
        if (j.contains("tiers")) {
            c.tiers.clear();
            for (const auto& tj : j.at("tiers")) {
                TierConfig t;
                t.kind = tier_kind_from_string(tj.value("kind", std::string("local_dir")));
                t.root = tj.value("root", std::string());
                t.read_mb_s = tj.value("read_mb_s", 0.0);
                t.write_mb_s = tj.value("write_mb_s", 0.0);
                t.io_parallelism = tj.value("io_parallelism", 1);
                t.persistent = tj.value("persistent", t.kind == TierKind::remote_dir);
                t.probe = tj.value("probe", false);
                t.probe_mib = tj.value("probe_mib", 8.0);
                t.probe_reps = tj.value("probe_reps", 3);
                c.tiers.push_back(t);
            }
        }
        if (j.contains("placement")) {
            const auto& p = j.at("placement");
            c.placement.alpha = p.value("alpha", 0.5);
            if (p.contains("ratio")) c.placement.ratio = p.at("ratio").get<std::vector<double>>();
        }
        if (j.contains("optim")) {
            const auto& o = j.at("optim");
            c.optim.lr = o.value("lr", c.optim.lr);
            c.optim.beta1 = o.value("beta1", c.optim.beta1);
            c.optim.beta2 = o.value("beta2", c.optim.beta2);
            c.optim.eps = o.value("eps", c.optim.eps);
            c.optim.weight_decay = o.value("weight_decay", c.optim.weight_decay);
        }
        if (j.contains("schedule")) {
            const auto& s = j.at("schedule");
            c.schedule.pool_slots = s.value("pool_slots", c.schedule.pool_slots);
            c.schedule.cache_slots = s.value("cache_slots", c.schedule.cache_slots);
            c.schedule.workers_per_node = s.value("workers_per_node", c.schedule.workers_per_node);
            c.schedule.lock_dir = s.value("lock_dir", c.schedule.lock_dir);
            c.schedule.update_threads = s.value("update_threads", c.schedule.update_threads);
            c.schedule.deadlock_timeout_s =
                s.value("deadlock_timeout_s", c.schedule.deadlock_timeout_s);
        }
        if (j.contains("run")) {
            const auto& r = j.at("run");
            c.run.iterations = r.value("iterations", c.run.iterations);
            c.run.warmup_iterations = r.value("warmup_iterations", c.run.warmup_iterations);
            c.run.grad_accum_steps = r.value("grad_accum_steps", c.run.grad_accum_steps);
            c.run.mode = r.value("mode", c.run.mode);
            c.run.seed = r.value("seed", c.run.seed);
            c.run.forward_stub_ms = r.value("forward_stub_ms", c.run.forward_stub_ms);
            c.run.update_pad_us = r.value("update_pad_us", c.run.update_pad_us);
        }
        if (j.contains("ablation")) {
            const auto& a = j.at("ablation");
            if (a.contains("enable_caching")) c.enable_caching = a.at("enable_caching").get<bool>();
            if (a.contains("skip_gradients")) c.skip_gradients = a.at("skip_gradients").get<bool>();
            if (a.contains("atomic_rw")) c.atomic_rw = a.at("atomic_rw").get<bool>();
            if (a.contains("multi_path")) c.multi_path = a.at("multi_path").get<bool>();
        }
        return c;
    }

    static RunConfig from_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file " + path.string());
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config parse error in " + path.string() + ": " + e.what());
        }
        return from_json(j);
    }
};

}  // namespace tierflow
