// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "tierflow/common.hpp"
#include "tierflow/token_bucket.hpp"

namespace tierflow {

enum class TierKind { local_dir, remote_dir, mem_throttled };

inline const char* tier_kind_name(TierKind k) {
    switch (k) {
        case TierKind::local_dir: return "local_dir";
        case TierKind::remote_dir: return "remote_dir";
        case TierKind::mem_throttled: return "mem_throttled";
    }
    return "unknown";
}

struct TierSpec {
    TierId tier_id = 0;
    TierKind kind = TierKind::local_dir;
    std::filesystem::path root;  // directory for *_dir kinds, label otherwise
    double read_bw = 0.0;        // bytes/second, measured or configured
    double write_bw = 0.0;
    int io_parallelism = 1;  // preferred concurrent streams
    bool persistent = false;
};

struct ProbeResult {
    double read_bw = 0.0;
    double write_bw = 0.0;
    bool low_confidence = false;  // a timing had to be clamped to timer resolution
};

// ---------------------------------------------------------------------------
// Subgroup file format. 32-byte little-endian header followed by the payload;
// for optimizer state the payload is params_f32 || momentum_f32 || variance_f32,
// contiguous (3 * 4 * param_count bytes).

namespace wire {

inline void put_u16(std::uint8_t* p, std::uint16_t v) {
    p[0] = static_cast<std::uint8_t>(v);
    p[1] = static_cast<std::uint8_t>(v >> 8);
}
inline void put_u32(std::uint8_t* p, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}
inline void put_u64(std::uint8_t* p, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}
inline std::uint16_t get_u16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}
inline std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

}  // namespace wire

struct SubgroupFileHeader {
    static constexpr std::uint32_t kMagic = 0x4D4C504F;
    static constexpr std::uint16_t kVersion = 1;
    static constexpr std::uint16_t kElementF32 = 0;
    static constexpr std::size_t kSize = 32;

    std::uint32_t magic = kMagic;
    std::uint16_t version = kVersion;
    std::uint16_t element_kind = kElementF32;
    std::uint32_t subgroup_id = 0;
    std::uint64_t param_count = 0;

    std::array<std::uint8_t, kSize> encode() const {
        std::array<std::uint8_t, kSize> buf{};
        wire::put_u32(buf.data() + 0, magic);
        wire::put_u16(buf.data() + 4, version);
        wire::put_u16(buf.data() + 6, element_kind);
        wire::put_u32(buf.data() + 8, subgroup_id);
        wire::put_u64(buf.data() + 12, param_count);
        return buf;  // bytes 20..31 reserved, zero
    }

    static SubgroupFileHeader decode(const std::uint8_t* buf) {
        SubgroupFileHeader h;
        h.magic = wire::get_u32(buf + 0);
        h.version = wire::get_u16(buf + 4);
        h.element_kind = wire::get_u16(buf + 6);
        h.subgroup_id = wire::get_u32(buf + 8);
        h.param_count = wire::get_u64(buf + 12);
        return h;
    }

    void validate(std::uint32_t expected_id, std::uint64_t expected_params) const {
        if (magic != kMagic) throw FormatError("subgroup file: bad magic");
        if (version != kVersion) throw FormatError("subgroup file: unsupported version");
        if (element_kind != kElementF32) throw FormatError("subgroup file: unknown element kind");
        if (subgroup_id != expected_id)
            throw FormatError("subgroup file: id mismatch (" + std::to_string(subgroup_id) +
                              " != " + std::to_string(expected_id) + ")");
        if (param_count != expected_params)
            throw FormatError("subgroup file: param_count mismatch");
    }
};

inline std::string subgroup_file_name(SubgroupId id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "sg_%06u.bin", id);
    return buf;
}

inline std::string grad_file_name(SubgroupId id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "grad_%06u.bin", id);
    return buf;
}

// ---------------------------------------------------------------------------
// Tier: one storage backend. Directory tiers write real files; mem_throttled
// keeps blobs in memory behind a token bucket of device time, one server's
// worth: a transfer of b bytes consumes b/direction_rate seconds, so reads
// and writes contend for the same device and concurrent clients split the
// configured rates, the way shared physical media behave. Transfers are
// blocking leaf calls; asynchrony and the node-level lock discipline live in
// the scheduler. Reported IoStats cover payload bytes and transfer wall time.

class Tier {
public:
    explicit Tier(TierSpec spec) : spec_(std::move(spec)) {
        if (spec_.io_parallelism < 1) throw ConfigError("tier io_parallelism must be >= 1");
        if (spec_.kind == TierKind::mem_throttled) {
            if (!(spec_.read_bw > 0.0) || !(spec_.write_bw > 0.0))
                throw ConfigError("mem_throttled tier needs configured read/write rates");
            mem_read_bw_.store(spec_.read_bw);
            mem_write_bw_.store(spec_.write_bw);
            device_bucket_ = std::make_unique<TokenBucket>(1.0);  // device-seconds
        } else {
            std::error_code ec;
            std::filesystem::create_directories(spec_.root, ec);
            if (ec)
                throw IoError("tier " + std::to_string(spec_.tier_id) +
                              ": cannot create root " + spec_.root.string());
        }
    }

    const TierSpec& spec() const { return spec_; }
    TierId id() const { return spec_.tier_id; }

    // Retarget the throttle mid-run (mem_throttled only); models external
    // bandwidth shifts like PFS contention from other jobs.
    void set_throttle_rates(double read_bps, double write_bps) {
        if (spec_.kind != TierKind::mem_throttled)
            throw ConfigError("set_throttle_rates: not a throttled tier");
        if (!(read_bps > 0.0) || !(write_bps > 0.0))
            throw ConfigError("throttle rates must be > 0");
        mem_read_bw_.store(read_bps);
        mem_write_bw_.store(write_bps);
        spec_.read_bw = read_bps;
        spec_.write_bw = write_bps;
    }

    IoStats write_subgroup(SubgroupId id, std::uint64_t param_count,
                           std::span<const float> state) {
        if (state.size() != 3 * param_count) throw Error("write_subgroup: state length mismatch");
        return write_blob(subgroup_file_name(id), id, param_count,
                          as_bytes_span(state));
    }

    IoStats read_subgroup(SubgroupId id, std::uint64_t param_count, std::span<float> state) {
        if (state.size() != 3 * param_count) throw Error("read_subgroup: state length mismatch");
        return read_blob(subgroup_file_name(id), id, param_count, as_writable_bytes_span(state));
    }

    IoStats write_grads(SubgroupId id, std::uint64_t param_count, std::span<const float> grads) {
        if (grads.size() != param_count) throw Error("write_grads: length mismatch");
        return write_blob(grad_file_name(id), id, param_count, as_bytes_span(grads));
    }

    IoStats read_grads(SubgroupId id, std::uint64_t param_count, std::span<float> grads) {
        if (grads.size() != param_count) throw Error("read_grads: length mismatch");
        return read_blob(grad_file_name(id), id, param_count, as_writable_bytes_span(grads));
    }

    bool has_subgroup(SubgroupId id) const { return has_blob(subgroup_file_name(id)); }

    void remove_subgroup(SubgroupId id) {
        remove_blob(subgroup_file_name(id));
        remove_blob(grad_file_name(id));
    }

    // Timed write/read microbenchmark; the first repetition is a warm-up and
    // excluded from the reported means. Updates the spec's bandwidths.
    ProbeResult probe_bandwidth(std::uint64_t probe_bytes, int repetitions) {
        if (probe_bytes < (1u << 20)) throw ConfigError("probe_bytes must be >= 1 MiB");
        if (repetitions < 2) throw ConfigError("probe needs >= 2 repetitions");
        ProbeResult result;
        double wsum = 0.0, rsum = 0.0;
        for (int rep = 0; rep < repetitions; ++rep) {
            const double wsec = probe_write_once(probe_bytes, result);
            const double rsec = probe_read_once(probe_bytes, result);
            if (rep == 0) continue;
            wsum += static_cast<double>(probe_bytes) / wsec;
            rsum += static_cast<double>(probe_bytes) / rsec;
        }
        probe_cleanup();
        result.write_bw = wsum / (repetitions - 1);
        result.read_bw = rsum / (repetitions - 1);
        spec_.read_bw = result.read_bw;
        spec_.write_bw = result.write_bw;
        return result;
    }

    // Free capacity for the harness pre-flight check.
    std::uint64_t available_bytes() const {
        if (spec_.kind == TierKind::mem_throttled) {
            std::ifstream mi("/proc/meminfo");
            std::string key;
            std::uint64_t kb = 0;
            while (mi >> key >> kb) {
                if (key == "MemAvailable:") return kb * 1024;
                mi.ignore(256, '\n');
            }
            return 1ull << 32;  // meminfo unavailable; assume enough
        }
        std::error_code ec;
        const auto s = std::filesystem::space(spec_.root, ec);
        if (ec) throw IoError("tier " + std::to_string(spec_.tier_id) + ": cannot stat root");
        return s.available;
    }

private:
    static std::span<const std::uint8_t> as_bytes_span(std::span<const float> s) {
        return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size_bytes()};
    }
    static std::span<std::uint8_t> as_writable_bytes_span(std::span<float> s) {
        return {reinterpret_cast<std::uint8_t*>(s.data()), s.size_bytes()};
    }

    std::string err_ctx() const {
        return "tier " + std::to_string(spec_.tier_id) + " (" + tier_kind_name(spec_.kind) + ")";
    }

    // --- directory backend ---------------------------------------------------

    IoStats dir_write(const std::string& name, std::span<const std::uint8_t> header,
                      std::span<const std::uint8_t> payload) {
        const auto path = spec_.root / name;
        const auto t0 = std::chrono::steady_clock::now();
        const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
        if (fd < 0)
            throw IoError(err_ctx() + ": cannot create " + path.string() + ": " +
                          std::strerror(errno));
        try {
            write_all(fd, header.data(), header.size(), 0);
            rw_striped(fd, const_cast<std::uint8_t*>(payload.data()), payload.size(),
                       static_cast<off_t>(header.size()), /*do_write=*/true);
            if (::fdatasync(fd) != 0)
                throw IoError(err_ctx() + ": fdatasync failed: " + std::string(std::strerror(errno)));
        } catch (...) {
            ::close(fd);
            throw;
        }
        ::close(fd);
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return IoStats{payload.size(), sec};
    }

    IoStats dir_read(const std::string& name, SubgroupId id, std::uint64_t param_count,
                     std::span<std::uint8_t> payload) {
        const auto path = spec_.root / name;
        const auto t0 = std::chrono::steady_clock::now();
        const int fd = ::open(path.c_str(), O_RDONLY);
        if (fd < 0) {
            if (errno == ENOENT)
                throw PlacementInconsistencyError(err_ctx() + ": subgroup " + std::to_string(id) +
                                                  " not present (" + path.string() + ")");
            throw IoError(err_ctx() + ": cannot open " + path.string() + ": " +
                          std::strerror(errno));
        }
        try {
            std::array<std::uint8_t, SubgroupFileHeader::kSize> hbuf{};
            read_all(fd, hbuf.data(), hbuf.size(), 0);
            SubgroupFileHeader::decode(hbuf.data()).validate(id, param_count);
            rw_striped(fd, payload.data(), payload.size(),
                       static_cast<off_t>(SubgroupFileHeader::kSize), /*do_write=*/false);
        } catch (...) {
            ::close(fd);
            throw;
        }
        ::close(fd);
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return IoStats{payload.size(), sec};
    }

    void write_all(int fd, const std::uint8_t* buf, std::size_t n, off_t off) const {
        while (n > 0) {
            const ssize_t w = ::pwrite(fd, buf, n, off);
            if (w < 0) {
                if (errno == EINTR) continue;
                throw IoError(err_ctx() + ": write failed: " + std::string(std::strerror(errno)));
            }
            buf += w;
            n -= static_cast<std::size_t>(w);
            off += w;
        }
    }

    void read_all(int fd, std::uint8_t* buf, std::size_t n, off_t off) const {
        while (n > 0) {
            const ssize_t r = ::pread(fd, buf, n, off);
            if (r < 0) {
                if (errno == EINTR) continue;
                throw IoError(err_ctx() + ": read failed: " + std::string(std::strerror(errno)));
            }
            if (r == 0) throw FormatError(err_ctx() + ": truncated file");
            buf += r;
            n -= static_cast<std::size_t>(r);
            off += r;
        }
    }

    // Splits one transfer into io_parallelism contiguous stripes. Only worth
    // it for large payloads; the caller still counts as a single in-flight
    // operation under the tier lock.
    void rw_striped(int fd, std::uint8_t* base, std::size_t nbytes, off_t file_off,
                    bool do_write) {
        const int streams = spec_.io_parallelism;
        if (streams <= 1 || nbytes < (8u << 20)) {
            if (do_write)
                write_all(fd, base, nbytes, file_off);
            else
                read_all(fd, base, nbytes, file_off);
            return;
        }
        const std::size_t stripe = (nbytes + static_cast<std::size_t>(streams) - 1) /
                                   static_cast<std::size_t>(streams);
        std::vector<std::thread> threads;
        std::exception_ptr first_error;
        std::mutex err_mu;
        for (int s = 0; s < streams; ++s) {
            const std::size_t begin = stripe * static_cast<std::size_t>(s);
            if (begin >= nbytes) break;
            const std::size_t len = std::min(stripe, nbytes - begin);
            threads.emplace_back([&, begin, len] {
                try {
                    if (do_write)
                        write_all(fd, base + begin, len, file_off + static_cast<off_t>(begin));
                    else
                        read_all(fd, base + begin, len, file_off + static_cast<off_t>(begin));
                } catch (...) {
                    std::lock_guard<std::mutex> g(err_mu);
                    if (!first_error) first_error = std::current_exception();
                }
            });
        }
        for (auto& t : threads) t.join();
        if (first_error) std::rethrow_exception(first_error);
    }

    // --- throttled in-memory backend -----------------------------------------

    // The copy is interleaved with the pacing in ~4 ms chunks, each chunk
    // copied first and charged after, so the data movement (including page
    // faults on a fresh blob) is credited against the outstanding device-time
    // debt instead of serializing on top of it. References into mem_store_
    // stay valid without the lock (unordered_map nodes are stable), and the
    // scheduler never reads and rewrites the same blob concurrently.
    IoStats mem_write(const std::string& name, std::span<const std::uint8_t> header,
                      std::span<const std::uint8_t> payload) {
        const auto t0 = std::chrono::steady_clock::now();
        const double rate = mem_write_bw_.load();
        std::vector<std::uint8_t>* blob = nullptr;
        {
            std::lock_guard<std::mutex> g(mem_mu_);
            blob = &mem_store_[name];
        }
        blob->clear();
        blob->reserve(header.size() + payload.size());
        blob->insert(blob->end(), header.begin(), header.end());
        const std::size_t chunk = pacing_chunk(rate);
        for (std::size_t off = 0; off < payload.size(); off += chunk) {
            const std::size_t n = std::min(chunk, payload.size() - off);
            blob->insert(blob->end(), payload.data() + off, payload.data() + off + n);
            device_bucket_->acquire(static_cast<double>(n) / rate);
        }
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return IoStats{payload.size(), sec};
    }

    IoStats mem_read(const std::string& name, SubgroupId id, std::uint64_t param_count,
                     std::span<std::uint8_t> payload) {
        const auto t0 = std::chrono::steady_clock::now();
        const double rate = mem_read_bw_.load();
        const std::vector<std::uint8_t>* blob = nullptr;
        {
            std::lock_guard<std::mutex> g(mem_mu_);
            auto it = mem_store_.find(name);
            if (it == mem_store_.end())
                throw PlacementInconsistencyError(err_ctx() + ": subgroup " + std::to_string(id) +
                                                  " not present (" + name + ")");
            blob = &it->second;
        }
        if (blob->size() != SubgroupFileHeader::kSize + payload.size())
            throw FormatError(err_ctx() + ": truncated blob " + name);
        SubgroupFileHeader::decode(blob->data()).validate(id, param_count);
        const std::size_t chunk = pacing_chunk(rate);
        for (std::size_t off = 0; off < payload.size(); off += chunk) {
            const std::size_t n = std::min(chunk, payload.size() - off);
            std::memcpy(payload.data() + off, blob->data() + SubgroupFileHeader::kSize + off, n);
            device_bucket_->acquire(static_cast<double>(n) / rate);
        }
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return IoStats{payload.size(), sec};
    }

    static std::size_t pacing_chunk(double rate) {
        return std::max<std::size_t>(256 * 1024, static_cast<std::size_t>(rate * 0.004));
    }

    // --- dispatch -------------------------------------------------------------

    IoStats write_blob(const std::string& name, SubgroupId id, std::uint64_t param_count,
                       std::span<const std::uint8_t> payload) {
        SubgroupFileHeader h;
        h.subgroup_id = id;
        h.param_count = param_count;
        const auto header = h.encode();
        if (spec_.kind == TierKind::mem_throttled) return mem_write(name, header, payload);
        return dir_write(name, header, payload);
    }

    IoStats read_blob(const std::string& name, SubgroupId id, std::uint64_t param_count,
                      std::span<std::uint8_t> payload) {
        if (spec_.kind == TierKind::mem_throttled) return mem_read(name, id, param_count, payload);
        return dir_read(name, id, param_count, payload);
    }

    bool has_blob(const std::string& name) const {
        if (spec_.kind == TierKind::mem_throttled) {
            std::lock_guard<std::mutex> g(mem_mu_);
            return mem_store_.count(name) != 0;
        }
        return std::filesystem::exists(spec_.root / name);
    }

    void remove_blob(const std::string& name) {
        if (spec_.kind == TierKind::mem_throttled) {
            std::lock_guard<std::mutex> g(mem_mu_);
            mem_store_.erase(name);
            return;
        }
        std::error_code ec;
        std::filesystem::remove(spec_.root / name, ec);
    }

    // --- probing ---------------------------------------------------------------

    static double clamp_duration(double sec, ProbeResult& result) {
        if (sec < 1e-6) {
            result.low_confidence = true;
            return 1e-6;
        }
        return sec;
    }

    double probe_write_once(std::uint64_t bytes, ProbeResult& result) {
        if (spec_.kind == TierKind::mem_throttled) {
            const auto t0 = std::chrono::steady_clock::now();
            device_bucket_->acquire(static_cast<double>(bytes) / mem_write_bw_.load());
            probe_blob_.assign(bytes, 0xA5);
            return clamp_duration(
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
                result);
        }
        const auto path = spec_.root / probe_file_name();
        ensure_probe_buffer(bytes);
        int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_DIRECT, 0644);
        bool direct = fd >= 0;
        if (!direct) fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
        if (fd < 0)
            throw IoError(err_ctx() + ": probe failure, cannot write under " +
                          spec_.root.string() + ": " + std::strerror(errno));
        const auto t0 = std::chrono::steady_clock::now();
        try {
            write_all(fd, probe_buffer_.get(), probe_buffer_bytes_, 0);
            if (::fdatasync(fd) != 0)
                throw IoError(err_ctx() + ": probe fdatasync failed");
        } catch (...) {
            ::close(fd);
            throw;
        }
        const double sec =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!direct) ::posix_fadvise(fd, 0, 0, POSIX_FADV_DONTNEED);
        ::close(fd);
        return clamp_duration(sec, result);
    }

    double probe_read_once(std::uint64_t bytes, ProbeResult& result) {
        if (spec_.kind == TierKind::mem_throttled) {
            const auto t0 = std::chrono::steady_clock::now();
            device_bucket_->acquire(static_cast<double>(bytes) / mem_read_bw_.load());
            volatile std::uint8_t sink = 0;
            if (!probe_blob_.empty()) sink = probe_blob_[probe_blob_.size() / 2];
            (void)sink;
            return clamp_duration(
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
                result);
        }
        const auto path = spec_.root / probe_file_name();
        ensure_probe_buffer(bytes);
        int fd = ::open(path.c_str(), O_RDONLY | O_DIRECT);
        if (fd < 0) fd = ::open(path.c_str(), O_RDONLY);
        if (fd < 0)
            throw IoError(err_ctx() + ": probe failure, cannot read back probe file: " +
                          std::string(std::strerror(errno)));
        const auto t0 = std::chrono::steady_clock::now();
        try {
            read_all(fd, probe_buffer_.get(), probe_buffer_bytes_, 0);
        } catch (...) {
            ::close(fd);
            throw;
        }
        const double sec =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ::posix_fadvise(fd, 0, 0, POSIX_FADV_DONTNEED);
        ::close(fd);
        return clamp_duration(sec, result);
    }

    void probe_cleanup() {
        probe_blob_.clear();
        probe_blob_.shrink_to_fit();
        probe_buffer_.reset();
        probe_buffer_bytes_ = 0;
        if (spec_.kind != TierKind::mem_throttled) {
            std::error_code ec;
            std::filesystem::remove(spec_.root / probe_file_name(), ec);
        }
    }

    std::string probe_file_name() const { return "probe_" + std::to_string(::getpid()) + ".tmp"; }

    void ensure_probe_buffer(std::uint64_t bytes) {
        // O_DIRECT needs block-aligned buffers and sizes.
        const std::size_t aligned = (bytes + 4095u) & ~static_cast<std::size_t>(4095u);
        if (probe_buffer_ && probe_buffer_bytes_ == aligned) return;
        void* mem = nullptr;
        if (posix_memalign(&mem, 4096, aligned) != 0)
            throw IoError(err_ctx() + ": probe buffer allocation failed");
        std::memset(mem, 0xA5, aligned);
        probe_buffer_.reset(static_cast<std::uint8_t*>(mem));
        probe_buffer_bytes_ = aligned;
    }

    struct FreeDeleter {
        void operator()(std::uint8_t* p) const { std::free(p); }
    };

    TierSpec spec_;
    std::unique_ptr<TokenBucket> device_bucket_;  // one server's worth of device time
    std::atomic<double> mem_read_bw_{0.0};
    std::atomic<double> mem_write_bw_{0.0};
    mutable std::mutex mem_mu_;
    std::unordered_map<std::string, std::vector<std::uint8_t>> mem_store_;
    std::vector<std::uint8_t> probe_blob_;
    std::unique_ptr<std::uint8_t, FreeDeleter> probe_buffer_;
    std::size_t probe_buffer_bytes_ = 0;
};

}  // namespace tierflow
