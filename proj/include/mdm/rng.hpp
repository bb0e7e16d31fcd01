#pragma once

// Seeded random source with an explicit draw protocol. Every consumer draws
// through the named methods below so that variate consumption (and therefore
// reproducibility) is part of each algorithm's contract, not an accident of
// std::distribution internals.

#include <cstdint>
#include <random>
#include <stdexcept>

namespace mdm {

// splitmix64 finalizer; used to derive well-separated sub-seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic sub-seed for a named stream (component, item index, ...).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return mix64(seed ^ mix64(stream));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t bits() { return engine_(); }

    // Uniform in [0, 1). Exactly one engine call, 53 random bits.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n). Unbiased via rejection.
    int uniform_int(int n) {
        if (n <= 0) {
            throw std::invalid_argument("Rng::uniform_int: n must be positive");
        }
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t r;
        do {
            r = engine_();
        } while (r >= limit);
        return static_cast<int>(r % un);
    }

    // Independent generator for a sub-task, decoupled from this stream's state.
    Rng fork(std::uint64_t stream) { return Rng(derive_seed(engine_(), stream)); }

private:
    std::mt19937_64 engine_;
};

} // namespace mdm
