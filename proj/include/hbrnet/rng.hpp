#pragma once

#include <cstdint>

namespace hbrnet {

/// Counter-based random stream. Every draw is a pure function of
/// (seed, counter), so sequences are identical on every platform.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed = 0, std::uint64_t counter = 0)
        : seed_(seed), counter_(counter) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    /// Standard normal via Box-Muller (one value per call, two draws consumed).
    double normal();
    bool bernoulli(double p) { return uniform() < p; }

    /// Independent child stream; the parent is not advanced.
    RngStream derive(std::uint64_t tag) const;

private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

std::uint64_t mix64(std::uint64_t x);
/// Seed derivation used for module, fold and patient offsets.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

}  // namespace hbrnet
