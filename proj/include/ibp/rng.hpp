#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace ibp {

/// Deterministic random source built on std::mt19937_64, whose output
/// sequence is fixed by the C++ standard. Uniform and normal variates are
/// derived here rather than through <random> distributions, which are
/// implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; the second variate of each pair is cached.
    double normal();

    /// Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    std::uint64_t below(std::uint64_t n);

    template <class T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Mixes a base seed with a purpose tag and an index so that independent
/// consumers (init, shuffling, dropout, noise, ...) never share a stream.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0);

}  // namespace ibp
