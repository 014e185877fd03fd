#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace motionforge {

/// Counter-based 64-bit generator ("mf-ctr64", version 1).
///
/// Output i of a stream is splitmix64(key + (i + 1) * golden), so any draw can be
/// recomputed from (key, index) alone. Streams derived with `fork` are independent
/// for practical purposes and reproducible on every platform.
class CounterRng {
public:
    static constexpr std::string_view kName = "mf-ctr64";
    static constexpr int kVersion = 1;

    explicit CounterRng(std::uint64_t key) : key_(key) {}

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t position() const noexcept { return counter_; }

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    /// Uniform in (0, 1]; never returns zero.
    double uniform_open0();
    /// Unbiased integer in [0, bound) (Lemire's multiply-and-reject).
    std::uint64_t below(std::uint64_t bound);
    /// Standard normal via Box-Muller; consumes two draws per pair, caching the spare.
    double normal();

    void fill_normal(std::span<double> out);

    /// Derives an independent child stream keyed by (key, tag).
    CounterRng fork(std::uint64_t tag) const;

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Stable 64-bit FNV-1a hash of a byte string.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace motionforge
