#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "barack/errors.hpp"

namespace barack {

/// Counter-based generator built on the splitmix64 finalizer. Output i of
/// stream s under seed k is mix(key(k,s) + i*phi), so any position in any
/// stream can be reproduced without replaying the sequence, and the same
/// (seed, stream) pair yields the same values on every platform.
///
/// Stream ids partition a run seed into independent substreams; the named
/// ones used throughout the library are in barack::streams.
class Rng {
  public:
    Rng(std::uint64_t seed, std::uint64_t stream)
        : key_(mix(mix(seed + kPhi) ^ mix(stream))) {}

    std::uint64_t next_u64() { return mix(key_ + (++counter_) * kPhi); }

    /// Uniform in [0,1) with 53 bits.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in {0,...,n-1} via multiply-high (no modulo bias).
    std::uint64_t uniform_int(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    /// Standard normal via Box-Muller; consumes two outputs per call.
    double normal() {
        const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
        const double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Draw an index from an (unnormalized) nonnegative weight vector.
    std::size_t categorical(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        if (total <= 0.0) throw ParameterError("categorical: nonpositive total weight");
        double u = uniform01() * total;
        for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
            u -= weights[i];
            if (u < 0.0) return i;
        }
        return weights.size() - 1;
    }

    /// k distinct values from {0,...,n-1}, by partial Fisher-Yates.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        if (k > n) throw ParameterError("sample_without_replacement: k > n");
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + uniform_int(n - i);
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        return pool;
    }

  private:
    static constexpr std::uint64_t kPhi = 0x9E3779B97F4A7C15ull;

    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

/// Documented substreams of a run seed. Trainers further subdivide with
/// substream(); all constants are fixed so golden files stay stable.
namespace streams {
inline constexpr std::uint64_t data = 0x10;
inline constexpr std::uint64_t mask_train = 0x20;
inline constexpr std::uint64_t mask_val = 0x21;
inline constexpr std::uint64_t stage1 = 0x30;
inline constexpr std::uint64_t stage2 = 0x40;
inline constexpr std::uint64_t flips = 0x50;
inline constexpr std::uint64_t predict = 0x60;
inline constexpr std::uint64_t heldout = 0x70;
inline constexpr std::uint64_t theory = 0x80;
} // namespace streams

inline constexpr std::uint64_t substream(std::uint64_t stream, std::uint64_t k) {
    return stream * 0x100 + k;
}

} // namespace barack
