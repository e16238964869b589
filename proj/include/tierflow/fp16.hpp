// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>

namespace tierflow {

// IEEE-754 binary16 value, kept as raw bits. Conversions below are software
// implementations (no F16C dependency) so results are identical on every
// build target: widening is exact, narrowing is round-to-nearest-even with
// the standard overflow-to-infinity boundary at |x| >= 65520.
struct f16 {
    std::uint16_t bits = 0;

    friend bool operator==(f16 a, f16 b) { return a.bits == b.bits; }
    friend bool operator!=(f16 a, f16 b) { return a.bits != b.bits; }
};

inline bool f16_is_finite(f16 h) { return (h.bits & 0x7C00u) != 0x7C00u; }
inline bool f16_is_nan(f16 h) {
    return (h.bits & 0x7C00u) == 0x7C00u && (h.bits & 0x03FFu) != 0;
}

inline float f16_to_f32(f16 h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h.bits & 0x8000u) << 16;
    const std::uint32_t exp = (h.bits >> 10) & 0x1Fu;
    std::uint32_t man = h.bits & 0x03FFu;
    std::uint32_t out;
    if (exp == 0) {
        if (man == 0) {
            out = sign;  // +-0
        } else {
            // Subnormal: normalize the mantissa into an f32 normal.
            const int shift = std::countl_zero(man) - 21;  // MSB -> bit 10
            man <<= shift;
            out = sign | (static_cast<std::uint32_t>(113 - shift) << 23) |
                  ((man & 0x03FFu) << 13);
        }
    } else if (exp == 0x1F) {
        out = sign | 0x7F800000u | (man << 13);  // inf / nan, payload kept
    } else {
        out = sign | ((exp + 112u) << 23) | (man << 13);
    }
    return std::bit_cast<float>(out);
}

inline f16 f32_to_f16(float f) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t absx = x & 0x7FFFFFFFu;

    if (absx >= 0x7F800000u) {  // inf or nan
        if (absx > 0x7F800000u)
            return f16{static_cast<std::uint16_t>(sign | 0x7E00u | ((absx >> 13) & 0x03FFu) | 1u)};
        return f16{static_cast<std::uint16_t>(sign | 0x7C00u)};
    }

    const int e = static_cast<int>(absx >> 23) - 127;
    const std::uint32_t man = absx & 0x007FFFFFu;

    if (e >= 16) return f16{static_cast<std::uint16_t>(sign | 0x7C00u)};

    if (e >= -14) {
        // Normal range. Round the low 13 mantissa bits to nearest-even; the
        // carry propagates through the exponent field, turning 65504+ up
        // into infinity exactly at the IEEE boundary.
        const std::uint32_t rem = man & 0x1FFFu;
        std::uint16_t h = static_cast<std::uint16_t>(
            sign | (static_cast<std::uint32_t>(e + 15) << 10) | (man >> 13));
        if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
        return f16{h};
    }

    if (e < -25) return f16{sign};  // below half the smallest subnormal

    // Subnormal result: shift the 24-bit significand down; a round-up from
    // the top subnormal lands on the smallest normal encoding by arithmetic.
    const std::uint32_t full = man | 0x00800000u;
    const int shift = -e - 1;  // 14..24
    const std::uint32_t rem = full & ((1u << shift) - 1u);
    const std::uint32_t half = 1u << (shift - 1);
    std::uint32_t r = full >> shift;
    if (rem > half || (rem == half && (r & 1u))) ++r;
    return f16{static_cast<std::uint16_t>(sign | r)};
}

}  // namespace tierflow
