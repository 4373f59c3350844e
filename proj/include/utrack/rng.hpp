#pragma once

#include <cstdint>
#include <random>

namespace utrack {

// Seeded generator with portable output. Draws are derived from raw
// mt19937_64 words directly so that identical seeds give identical streams
// regardless of the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t raw() { return gen_(); }

    // Uniform [0, 1).
    double uniform() { return static_cast<double>(raw() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller with a cached spare.
    double normal();

    // Uniform index in [0, n).
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

    bool bernoulli(double p) { return uniform() < p; }

    // Derived generator for an independent sub-stream.
    Rng fork(std::uint64_t stream) { return Rng(gen_() ^ (0x9e3779b97f4a7c15ULL * (stream + 1))); }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace utrack
