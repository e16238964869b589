// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "tierflow/common.hpp"
#include "tierflow/scheduler.hpp"

namespace tierflow {

// Effective I/O throughput: mean over all transferred subgroups of
// 2 * subgroup_size_bytes / (read_time + write_time). Host-retained
// subgroups move no state and are excluded; an empty set yields
// not-applicable rather than a division by zero.
inline std::optional<double> effective_io_throughput(std::span<const SubgroupIoTimes> io) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& e : io) {
        if (!e.fetched || !e.flushed) continue;
        const double t = e.read_seconds + e.write_seconds;
        if (t <= 0.0) continue;
        sum += 2.0 * static_cast<double>(e.state_bytes) / t;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

struct IterationReport {
    int iteration = 0;
    bool warmup = false;
    bool skipped = false;  // gradient overflow: step not applied
    double forward_s = 0.0;
    double backward_s = 0.0;
    double update_s = 0.0;
    double update_throughput_mparams = 0.0;
    std::optional<double> effective_io_bps;
    std::vector<std::uint64_t> update_read_bytes;   // per tier, from trace counters
    std::vector<std::uint64_t> update_write_bytes;  // per tier
    std::vector<std::uint64_t> backward_write_bytes;
    double host_pct = 0.0;
    std::vector<double> tier_pct;
    std::uint64_t cache_hits = 0;
    std::uint64_t overflow_count = 0;
    std::vector<int> flush_allocation;
    int retained = 0;

    double iter_s() const { return forward_s + backward_s + update_s; }
};

struct RunSummary {
    std::string mode;
    int iterations = 0;
    int warmup_iterations = 0;
    int subgroups = 0;
    int workers = 1;
    std::uint64_t total_params = 0;
    std::uint64_t subgroup_param_count = 0;
    std::uint64_t seed = 0;
    std::vector<IterationReport> iters;

    double mean_iter_s = 0.0;
    double mean_forward_s = 0.0;
    double mean_backward_s = 0.0;
    double mean_update_s = 0.0;
    double mean_update_throughput_mparams = 0.0;
    std::optional<double> mean_effective_io_bps;

    // Aggregates over measured iterations only (warmups and skipped steps
    // excluded).
    void compute_aggregates() {
        double it = 0, fw = 0, bw = 0, up = 0, thr = 0, eio = 0;
        int n = 0, neio = 0;
        for (const auto& r : iters) {
            if (r.warmup || r.skipped) continue;
            it += r.iter_s();
            fw += r.forward_s;
            bw += r.backward_s;
            up += r.update_s;
            thr += r.update_throughput_mparams;
            if (r.effective_io_bps) {
                eio += *r.effective_io_bps;
                ++neio;
            }
            ++n;
        }
        if (n > 0) {
            mean_iter_s = it / n;
            mean_forward_s = fw / n;
            mean_backward_s = bw / n;
            mean_update_s = up / n;
            mean_update_throughput_mparams = thr / n;
        }
        mean_effective_io_bps =
            neio > 0 ? std::optional<double>(eio / neio) : std::nullopt;
    }
};

namespace detail {

inline nlohmann::ordered_json iteration_to_json(const IterationReport& r) {
    nlohmann::ordered_json j;
    j["iteration"] = r.iteration;
    j["warmup"] = r.warmup;
    j["skipped"] = r.skipped;
    j["forward_s"] = r.forward_s;
    j["backward_s"] = r.backward_s;
    j["update_s"] = r.update_s;
    j["iter_s"] = r.iter_s();
    j["update_throughput_mparams"] = r.update_throughput_mparams;
    if (r.effective_io_bps)
        j["effective_io_bps"] = *r.effective_io_bps;
    else
        j["effective_io_bps"] = nullptr;
    j["update_read_bytes"] = r.update_read_bytes;
    j["update_write_bytes"] = r.update_write_bytes;
    j["backward_write_bytes"] = r.backward_write_bytes;
    j["host_pct"] = r.host_pct;
    j["tier_pct"] = r.tier_pct;
    j["cache_hits"] = r.cache_hits;
    j["overflow_count"] = r.overflow_count;
    j["flush_allocation"] = r.flush_allocation;
    j["retained"] = r.retained;
    return j;
}

inline IterationReport iteration_from_json(const nlohmann::json& j) {
    IterationReport r;
    r.iteration = j.at("iteration").get<int>();
    r.warmup = j.at("warmup").get<bool>();
    r.skipped = j.at("skipped").get<bool>();
    r.forward_s = j.at("forward_s").get<double>();
    r.backward_s = j.at("backward_s").get<double>();
    r.update_s = j.at("update_s").get<double>();
    r.update_throughput_mparams = j.at("update_throughput_mparams").get<double>();
    if (!j.at("effective_io_bps").is_null())
        r.effective_io_bps = j.at("effective_io_bps").get<double>();
    r.update_read_bytes = j.at("update_read_bytes").get<std::vector<std::uint64_t>>();
    r.update_write_bytes = j.at("update_write_bytes").get<std::vector<std::uint64_t>>();
    r.backward_write_bytes = j.at("backward_write_bytes").get<std::vector<std::uint64_t>>();
    r.host_pct = j.at("host_pct").get<double>();
    r.tier_pct = j.at("tier_pct").get<std::vector<double>>();
    r.cache_hits = j.at("cache_hits").get<std::uint64_t>();
    r.overflow_count = j.at("overflow_count").get<std::uint64_t>();
    r.flush_allocation = j.at("flush_allocation").get<std::vector<int>>();
    r.retained = j.at("retained").get<int>();
    return r;
}

inline std::string csv_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline nlohmann::ordered_json summary_to_json(const RunSummary& s) {
    nlohmann::ordered_json j;
    j["mode"] = s.mode;
    j["iterations"] = s.iterations;
    j["warmup_iterations"] = s.warmup_iterations;
    j["subgroups"] = s.subgroups;
    j["workers"] = s.workers;
    j["total_params"] = s.total_params;
    j["subgroup_param_count"] = s.subgroup_param_count;
    j["seed"] = s.seed;
    j["mean_iter_s"] = s.mean_iter_s;
    j["mean_forward_s"] = s.mean_forward_s;
    j["mean_backward_s"] = s.mean_backward_s;
    j["mean_update_s"] = s.mean_update_s;
    j["mean_update_throughput_mparams"] = s.mean_update_throughput_mparams;
    if (s.mean_effective_io_bps)
        j["mean_effective_io_bps"] = *s.mean_effective_io_bps;
    else
        j["mean_effective_io_bps"] = nullptr;
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : s.iters) arr.push_back(detail::iteration_to_json(r));
    j["iterations_detail"] = arr;
    return j;
}

inline RunSummary summary_from_json(const nlohmann::json& j) {
    RunSummary s;
    s.mode = j.at("mode").get<std::string>();
    s.iterations = j.at("iterations").get<int>();
    s.warmup_iterations = j.at("warmup_iterations").get<int>();
    s.subgroups = j.at("subgroups").get<int>();
    s.workers = j.at("workers").get<int>();
    s.total_params = j.at("total_params").get<std::uint64_t>();
    s.subgroup_param_count = j.at("subgroup_param_count").get<std::uint64_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.mean_iter_s = j.at("mean_iter_s").get<double>();
    s.mean_forward_s = j.at("mean_forward_s").get<double>();
    s.mean_backward_s = j.at("mean_backward_s").get<double>();
    s.mean_update_s = j.at("mean_update_s").get<double>();
    s.mean_update_throughput_mparams = j.at("mean_update_throughput_mparams").get<double>();
    if (!j.at("mean_effective_io_bps").is_null())
        s.mean_effective_io_bps = j.at("mean_effective_io_bps").get<double>();
    for (const auto& rj : j.at("iterations_detail")) s.iters.push_back(detail::iteration_from_json(rj));
    return s;
}

inline RunSummary load_summary(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open report " + file.string());
    nlohmann::json j;
    in >> j;
    return summary_from_json(j);
}

// summary.json plus a per-iteration CSV, both bytewise deterministic for
// identical inputs.
inline void emit_report(const RunSummary& s, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create report directory " + dir.string());

    {
        std::ofstream out(dir / "summary.json", std::ios::trunc);
        if (!out) throw IoError("cannot write summary.json under " + dir.string());
        out << summary_to_json(s).dump(2) << "\n";
    }

    std::ofstream csv(dir / "iterations.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write iterations.csv under " + dir.string());
    const std::size_t tiers = s.iters.empty() ? 0 : s.iters.front().tier_pct.size();
    csv << "iteration,warmup,skipped,forward_s,backward_s,update_s,iter_s,"
           "update_throughput_mparams,effective_io_bps,cache_hits,overflow_count,retained,host_pct";
    for (std::size_t t = 0; t < tiers; ++t)
        csv << ",tier" << t << "_pct,tier" << t << "_read_bytes,tier" << t << "_write_bytes,tier"
            << t << "_backward_write_bytes,tier" << t << "_alloc";
    csv << "\n";
    for (const auto& r : s.iters) {
        csv << r.iteration << ',' << (r.warmup ? 1 : 0) << ',' << (r.skipped ? 1 : 0) << ','
            << detail::csv_double(r.forward_s) << ',' << detail::csv_double(r.backward_s) << ','
            << detail::csv_double(r.update_s) << ',' << detail::csv_double(r.iter_s()) << ','
            << detail::csv_double(r.update_throughput_mparams) << ','
            << (r.effective_io_bps ? detail::csv_double(*r.effective_io_bps) : "na") << ','
            << r.cache_hits << ',' << r.overflow_count << ',' << r.retained << ','
            << detail::csv_double(r.host_pct);
        for (std::size_t t = 0; t < tiers; ++t) {
            csv << ',' << detail::csv_double(t < r.tier_pct.size() ? r.tier_pct[t] : 0.0) << ','
                << (t < r.update_read_bytes.size() ? r.update_read_bytes[t] : 0) << ','
                << (t < r.update_write_bytes.size() ? r.update_write_bytes[t] : 0) << ','
                << (t < r.backward_write_bytes.size() ? r.backward_write_bytes[t] : 0) << ','
                << (t < r.flush_allocation.size() ? r.flush_allocation[t] : 0);
        }
        csv << "\n";
    }
}

// Side-by-side of a candidate run (a) against a baseline run (b).
inline nlohmann::ordered_json compare_reports(const RunSummary& a, const RunSummary& b) {
    nlohmann::ordered_json j;
    j["candidate_mode"] = a.mode;
    j["baseline_mode"] = b.mode;
    j["mean_iter_s"] = a.mean_iter_s;
    j["mean_update_s"] = a.mean_update_s;
    j["mean_backward_s"] = a.mean_backward_s;
    j["baseline_mean_iter_s"] = b.mean_iter_s;
    j["baseline_mean_update_s"] = b.mean_update_s;
    j["baseline_mean_backward_s"] = b.mean_backward_s;
    j["speedup_vs_baseline"] = a.mean_iter_s > 0 ? b.mean_iter_s / a.mean_iter_s : 0.0;
    j["update_speedup_vs_baseline"] = a.mean_update_s > 0 ? b.mean_update_s / a.mean_update_s : 0.0;
    j["backward_speedup_vs_baseline"] =
        a.mean_backward_s > 0 ? b.mean_backward_s / a.mean_backward_s : 0.0;
    return j;
}

}  // namespace tierflow
