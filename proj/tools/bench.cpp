// SPDX-License-Identifier: Apache-2.0
//
// bench: benchmark harness CLI for the tierflow offloading engine.
//
//   bench run --config <file> [--mode engine|baseline] [--trace-out <path>]
//             [--report-out <dir>] [ablation flags] [--multiprocess]
//   bench probe --tier <root> [--bytes-mib N] [--reps N]
//   bench compare <report_a> <report_b> [--out <file>]

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "tierflow/tierflow.hpp"

namespace fs = std::filesystem;
using namespace tierflow;

namespace {

struct RunArgs {
    std::string config_path;
    std::string mode;
    std::string trace_out;
    std::string report_out;
    int iterations = -1;
    int workers = -1;
    long long seed = -1;
    bool multiprocess = false;
    int worker_rank = -1;
    bool f_enable_caching = false, f_no_enable_caching = false;
    bool f_skip_gradients = false, f_no_skip_gradients = false;
    bool f_atomic_rw = false, f_no_atomic_rw = false;
    bool f_multi_path = false, f_no_multi_path = false;
};

void apply_overrides(RunConfig& cfg, const RunArgs& a) {
    if (!a.mode.empty()) cfg.run.mode = a.mode;
    if (a.iterations > 0) cfg.run.iterations = a.iterations;
    if (a.workers > 0) cfg.schedule.workers_per_node = a.workers;
    if (a.seed >= 0) cfg.run.seed = static_cast<std::uint64_t>(a.seed);
    if (a.f_enable_caching) cfg.enable_caching = true;
    if (a.f_no_enable_caching) cfg.enable_caching = false;
    if (a.f_skip_gradients) cfg.skip_gradients = true;
    if (a.f_no_skip_gradients) cfg.skip_gradients = false;
    if (a.f_atomic_rw) cfg.atomic_rw = true;
    if (a.f_no_atomic_rw) cfg.atomic_rw = false;
    if (a.f_multi_path) cfg.multi_path = true;
    if (a.f_no_multi_path) cfg.multi_path = false;
}

std::string self_exe() {
    char buf[4096];
    const ssize_t n = ::readlink("/proc/self/exe", buf, sizeof(buf) - 1);
    if (n <= 0) throw Error("cannot resolve own executable path");
    buf[n] = '\0';
    return buf;
}

void print_summary(const RunSummary& s) {
    std::printf("mode=%s subgroups=%d workers=%d params=%llu\n", s.mode.c_str(), s.subgroups,
                s.workers, static_cast<unsigned long long>(s.total_params));
    for (const auto& r : s.iters) {
        std::printf(
            "iter %2d%s forward=%.4fs backward=%.4fs update=%.4fs thru=%.1f Mparams/s hits=%llu\n",
            r.iteration, r.warmup ? " (warmup)" : (r.skipped ? " (skipped)" : ""), r.forward_s,
            r.backward_s, r.update_s, r.update_throughput_mparams,
            static_cast<unsigned long long>(r.cache_hits));
    }
    std::printf("mean: iter=%.4fs forward=%.4fs backward=%.4fs update=%.4fs thru=%.1f Mparams/s\n",
                s.mean_iter_s, s.mean_forward_s, s.mean_backward_s, s.mean_update_s,
                s.mean_update_throughput_mparams);
    if (s.mean_effective_io_bps)
        std::printf("mean effective I/O: %.1f MB/s\n", *s.mean_effective_io_bps / 1e6);
}

int run_single(const RunConfig& cfg, const RunArgs& a) {
    BenchRunner runner(cfg, a.worker_rank);
    const RunSummary summary = runner.run();
    if (!a.trace_out.empty()) runner.write_trace(a.trace_out);
    if (!a.report_out.empty()) emit_report(summary, a.report_out);
    print_summary(summary);
    return 0;
}

fs::path rank_trace_path(const std::string& trace_out, int rank) {
    fs::path p(trace_out);
    fs::path q = p.parent_path() / (p.stem().string() + ".rank" + std::to_string(rank) +
                                    p.extension().string());
    return q;
}

int run_multiprocess(const RunConfig& cfg, const RunArgs& a) {
    const int world = cfg.schedule.workers_per_node;
    const std::string exe = self_exe();
    std::vector<pid_t> pids;
    for (int rank = 0; rank < world; ++rank) {
        std::vector<std::string> args = {exe, "run", "--config", a.config_path,
                                         "--worker-rank", std::to_string(rank)};
        if (!a.mode.empty()) {
            args.push_back("--mode");
            args.push_back(a.mode);
        }
        if (a.iterations > 0) {
            args.push_back("--iterations");
            args.push_back(std::to_string(a.iterations));
        }
        if (a.workers > 0) {
            args.push_back("--workers");
            args.push_back(std::to_string(a.workers));
        }
        if (a.seed >= 0) {
            args.push_back("--seed");
            args.push_back(std::to_string(a.seed));
        }
        if (a.f_enable_caching) args.push_back("--enable-caching");
        if (a.f_no_enable_caching) args.push_back("--no-enable-caching");
        if (a.f_skip_gradients) args.push_back("--skip-gradients");
        if (a.f_no_skip_gradients) args.push_back("--no-skip-gradients");
        if (a.f_atomic_rw) args.push_back("--atomic-rw");
        if (a.f_no_atomic_rw) args.push_back("--no-atomic-rw");
        if (a.f_multi_path) args.push_back("--multi-path");
        if (a.f_no_multi_path) args.push_back("--no-multi-path");
        if (!a.trace_out.empty()) {
            args.push_back("--trace-out");
            args.push_back(rank_trace_path(a.trace_out, rank).string());
        }
        if (!a.report_out.empty()) {
            args.push_back("--report-out");
            args.push_back((fs::path(a.report_out) / ("rank_" + std::to_string(rank))).string());
        }

        const pid_t pid = ::fork();
        if (pid < 0) throw Error("fork failed");
        if (pid == 0) {
            std::vector<char*> argv;
            for (auto& s : args) argv.push_back(s.data());
            argv.push_back(nullptr);
            ::execv(exe.c_str(), argv.data());
            std::perror("execv");
            _exit(127);
        }
        pids.push_back(pid);
    }

    bool ok = true;
    for (const pid_t pid : pids) {
        int status = 0;
        ::waitpid(pid, &status, 0);
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) ok = false;
    }
    if (!ok) {
        std::fprintf(stderr, "multiprocess run: a worker process failed\n");
        return 1;
    }

    if (!a.trace_out.empty()) {
        std::vector<Event> merged;
        for (int rank = 0; rank < world; ++rank) {
            std::ifstream in(rank_trace_path(a.trace_out, rank));
            if (!in) continue;
            auto events = EventTrace::read_csv(in);
            merged.insert(merged.end(), events.begin(), events.end());
        }
        std::sort(merged.begin(), merged.end(),
                  [](const Event& x, const Event& y) { return x.timestamp_ns < y.timestamp_ns; });
        std::ofstream out(a.trace_out, std::ios::trunc);
        EventTrace::write_csv(out, merged);
        std::printf("merged trace: %s (%zu events)\n", a.trace_out.c_str(), merged.size());
    }

    if (!a.report_out.empty()) {
        // Combined summary: per-phase means averaged across ranks, update
        // throughput summed (ranks run concurrently); iteration detail from
        // rank 0.
        RunSummary combined;
        double it = 0, fw = 0, bw = 0, up = 0, thr = 0;
        int found = 0;
        for (int rank = 0; rank < world; ++rank) {
            const fs::path p =
                fs::path(a.report_out) / ("rank_" + std::to_string(rank)) / "summary.json";
            if (!fs::exists(p)) continue;
            const RunSummary s = load_summary(p);
            if (found == 0) combined = s;
            it += s.mean_iter_s;
            fw += s.mean_forward_s;
            bw += s.mean_backward_s;
            up += s.mean_update_s;
            thr += s.mean_update_throughput_mparams;
            ++found;
        }
        if (found > 0) {
            combined.workers = world;
            combined.mean_iter_s = it / found;
            combined.mean_forward_s = fw / found;
            combined.mean_backward_s = bw / found;
            combined.mean_update_s = up / found;
            combined.mean_update_throughput_mparams = thr;
            std::ofstream out(fs::path(a.report_out) / "summary.json", std::ios::trunc);
            out << summary_to_json(combined).dump(2) << "\n";
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tierflow offloading benchmark"};
    app.require_subcommand(1);

    RunArgs ra;
    auto* run = app.add_subcommand("run", "run the benchmark loop");
    run->add_option("--config", ra.config_path, "JSON config file")->required();
    run->add_option("--mode", ra.mode, "engine|baseline (overrides config)");
    run->add_option("--trace-out", ra.trace_out, "event trace output (.csv or .jsonl)");
    run->add_option("--report-out", ra.report_out, "report directory (summary.json + CSV)");
    run->add_option("--iterations", ra.iterations, "override run.iterations");
    run->add_option("--workers", ra.workers, "override schedule.workers_per_node");
    run->add_option("--seed", ra.seed, "override run.seed");
    run->add_flag("--multiprocess", ra.multiprocess,
                  "emulate workers as OS processes sharing tiers and locks");
    run->add_option("--worker-rank", ra.worker_rank, "internal: run a single worker shard")
        ->group("");  // hidden
    run->add_flag("--enable-caching", ra.f_enable_caching,
                  "alternating update order + host retention");
    run->add_flag("--no-enable-caching", ra.f_no_enable_caching, "")->group("");
    run->add_flag("--skip-gradients", ra.f_skip_gradients,
                  "delayed FP16->FP32 gradient conversion at update time");
    run->add_flag("--no-skip-gradients", ra.f_no_skip_gradients, "")->group("");
    run->add_flag("--atomic-rw", ra.f_atomic_rw, "node-level exclusive tier access");
    run->add_flag("--no-atomic-rw", ra.f_no_atomic_rw, "")->group("");
    run->add_flag("--multi-path", ra.f_multi_path, "place subgroups across all tiers");
    run->add_flag("--no-multi-path", ra.f_no_multi_path, "")->group("");

    std::string probe_root;
    double probe_mib = 8.0;
    int probe_reps = 3;
    auto* probe = app.add_subcommand("probe", "measure a directory tier's bandwidth");
    probe->add_option("--tier", probe_root, "tier root directory")->required();
    probe->add_option("--bytes-mib", probe_mib, "probe transfer size in MiB");
    probe->add_option("--reps", probe_reps, "repetitions (first is a warm-up)");

    std::string cmp_a, cmp_b, cmp_out;
    auto* cmp = app.add_subcommand("compare", "compare two run reports (candidate vs baseline)");
    cmp->add_option("report_a", cmp_a, "candidate summary.json")->required();
    cmp->add_option("report_b", cmp_b, "baseline summary.json")->required();
    cmp->add_option("--out", cmp_out, "write the comparison JSON here");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            RunConfig cfg = RunConfig::from_file(ra.config_path);
            apply_overrides(cfg, ra);
            cfg.validate();
            if (ra.multiprocess && ra.worker_rank < 0) return run_multiprocess(cfg, ra);
            return run_single(cfg, ra);
        }
        if (probe->parsed()) {
            TierSpec spec;
            spec.tier_id = 0;
            spec.kind = TierKind::local_dir;
            spec.root = probe_root;
            Tier tier(spec);
            const ProbeResult r = tier.probe_bandwidth(
                static_cast<std::uint64_t>(probe_mib * 1024.0 * 1024.0), probe_reps);
            std::printf("tier %s: read %.1f MB/s, write %.1f MB/s%s\n", probe_root.c_str(),
                        r.read_bw / 1e6, r.write_bw / 1e6,
                        r.low_confidence ? " (low confidence)" : "");
            return 0;
        }
        if (cmp->parsed()) {
            const RunSummary a = load_summary(cmp_a);
            const RunSummary b = load_summary(cmp_b);
            const auto j = compare_reports(a, b);
            std::cout << j.dump(2) << std::endl;
            if (!cmp_out.empty()) {
                std::ofstream out(cmp_out, std::ios::trunc);
                out << j.dump(2) << "\n";
            }
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
