#pragma once

#include <cstdint>

namespace emotalk {

// splitmix64: tiny, well-mixed, and (unlike std:: distributions) produces the
// same stream on every platform. All randomness in the library flows through
// this so runs are reproducible bit-for-bit.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    // Uniform in [0, 1) with 53 random bits (exactly representable in double).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    float next_float() { return static_cast<float>(next_double()); }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform integer in [0, n), rejection-sampled so there is no modulo bias.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) return 0;
        std::uint64_t limit = ~0ull - ~0ull % n;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    // Derive an independent stream; mixing a tag keeps sub-streams decorrelated.
    Rng fork(std::uint64_t tag) {
        std::uint64_t s = state_;
        std::uint64_t mixed = splitmix64(s) ^ (tag * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);
        state_ = s;
        next_u64(); // advance parent so successive forks differ
        return Rng(mixed);
    }

private:
    std::uint64_t state_;
};

// Stateless hash of several tags to a u64; used where randomness must depend
// only on coordinates (e.g. per-frame jitter) and not on call order.
inline std::uint64_t hash_mix(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                              std::uint64_t d = 0) {
    std::uint64_t s = a;
    std::uint64_t h = splitmix64(s);
    s ^= b + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    h = splitmix64(s);
    s ^= c + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    h = splitmix64(s);
    s ^= d + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return splitmix64(s);
}

} // namespace emotalk
