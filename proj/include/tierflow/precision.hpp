// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tierflow/common.hpp"
#include "tierflow/fp16.hpp"

namespace tierflow {

// Widens half-precision values into `dst` (exact, every f16 is representable
// in f32). Returns false — the gradient-overflow signal — if any input is
// NaN/Inf; dst is still fully written so callers that choose to continue can.
inline bool upscale_f16_to_f32(std::span<const f16> src, std::span<float> dst) {
    if (src.size() != dst.size()) throw Error("upscale: length mismatch");
    bool finite = true;
    for (std::size_t i = 0; i < src.size(); ++i) {
        finite &= (src[i].bits & 0x7C00u) != 0x7C00u;
        dst[i] = f16_to_f32(src[i]);
    }
    return finite;
}

// Narrows to half precision, IEEE round-to-nearest-even. Returns the number
// of outputs that landed on +-Inf (overflow is counted, never fatal).
inline std::size_t downscale_f32_to_f16(std::span<const float> src, std::span<f16> dst) {
    if (src.size() != dst.size()) throw Error("downscale: length mismatch");
    std::size_t overflows = 0;
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] = f32_to_f16(src[i]);
        if ((dst[i].bits & 0x7FFFu) == 0x7C00u) ++overflows;
    }
    return overflows;
}

inline bool all_finite(std::span<const f16> values) {
    bool finite = true;
    for (const f16 v : values) finite &= (v.bits & 0x7C00u) != 0x7C00u;
    return finite;
}

// Per-subgroup half-precision gradient accumulation buffer. It lives in host
// memory for the whole backward pass; accumulation arithmetic happens in f32
// and is rounded back to f16 each step to bound drift.
class GradBufferF16 {
public:
    GradBufferF16() = default;
    GradBufferF16(SubgroupId id, std::size_t length)
        : id_(id), values_(length, f16{0}) {}

    SubgroupId id() const { return id_; }
    std::size_t size() const { return values_.size(); }
    int accumulation_steps() const { return accumulation_steps_; }

    std::span<const f16> values() const { return values_; }
    std::span<f16> mutable_values() { return values_; }

    void reset() {
        std::fill(values_.begin(), values_.end(), f16{0});
        accumulation_steps_ = 0;
    }

    void accumulate(std::span<const f16> grads) {
        if (grads.size() != values_.size()) throw Error("grad accumulate: length mismatch");
        if (accumulation_steps_ == 0) {
            std::copy(grads.begin(), grads.end(), values_.begin());
        } else {
            for (std::size_t i = 0; i < values_.size(); ++i)
                values_[i] = f32_to_f16(f16_to_f32(values_[i]) + f16_to_f32(grads[i]));
        }
        ++accumulation_steps_;
    }

    bool finite() const { return all_finite(values_); }

private:
    SubgroupId id_ = 0;
    std::vector<f16> values_;
    int accumulation_steps_ = 0;
};

}  // namespace tierflow
