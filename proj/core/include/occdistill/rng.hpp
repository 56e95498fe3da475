// Copyright Contributors to the occdistill project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace occdistill {

/// Counter-based 64-bit generator: output n is splitmix64(seed + (n+1) * golden).
///
/// The stream depends only on (seed, counter), so it is reproducible across
/// platforms and standard libraries. Bounded integers use Lemire's
/// multiply-shift with rejection, doubles take the top 53 bits.
class CounterRng {
  public:
    explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t next_u64() {
        ++counter_;
        return mix(seed_ + counter_ * kGolden);
    }

    /// Uniform integer in [0, bound). bound must be > 0.
    __extension__ typedef unsigned __int128 u128;

    std::uint64_t uniform(std::uint64_t bound) {
        u128 m = static_cast<u128>(next_u64()) * bound;
        auto low = static_cast<std::uint64_t>(m);
        if (low < bound) {
            const std::uint64_t threshold = (0 - bound) % bound;
            while (low < threshold) {
                m = static_cast<u128>(next_u64()) * bound;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    /// Uniform double in [0, 1).
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller (one value per call).
    double normal() {
        // 1 - u keeps the log argument in (0, 1].
        const double u1 = 1.0 - uniform01();
        const double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t counter() const { return counter_; }

    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

  private:
    static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

} // namespace occdistill
