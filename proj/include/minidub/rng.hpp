#pragma once

#include <cmath>
#include <cstdint>

namespace minidub {

// Counter-based splitmix64 generator. The whole state is (seed, counter),
// which makes checkpointed runs trivially resumable: serialize two u64s.
class Rng {
public:
    Rng() = default;
    explicit Rng(uint64_t seed) : seed_(seed) {}

    uint64_t next_u64() {
        uint64_t z = seed_ + 0x9E3779B97F4A7C15ULL * (++counter_);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    // Box-Muller without a cached spare, so the state stays a pure counter.
    double gaussian() {
        double u1 = uniform(), u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // derive an independent stream without disturbing this one
    Rng fork(uint64_t tag) const {
        Rng child(seed_ ^ (0xA5A5A5A55A5A5A5AULL + tag * 0x9E3779B97F4A7C15ULL));
        return child;
    }

    uint64_t seed() const { return seed_; }
    uint64_t counter() const { return counter_; }
    void restore(uint64_t seed, uint64_t counter) { seed_ = seed; counter_ = counter; }

private:
    uint64_t seed_ = 0;
    uint64_t counter_ = 0;
};

}  // namespace minidub
