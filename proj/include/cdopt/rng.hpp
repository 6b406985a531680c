#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>

namespace cdopt {

// Self-contained deterministic PRNG stack. We avoid <random> distributions
// because their output is implementation-defined; every draw here is a fixed
// function of the 64-bit stream state, so seeded runs reproduce bit-for-bit.

// splitmix64: seed expander / stream splitter.
struct SplitMix64 {
    std::uint64_t state;

    explicit SplitMix64(std::uint64_t seed) : state(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
};

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Documented seed-split function: a stream is identified by (master seed,
// label). Labels are stable strings like "compressor/x/agent/3", so adding
// agents or variables never perturbs existing streams.
inline std::uint64_t derive_stream(std::uint64_t master, std::string_view label) {
    SplitMix64 sm(master ^ fnv1a64(label));
    sm.next();
    return sm.next();
}

// xoshiro256** by Blackman & Vigna, seeded through splitmix64.
class Xoshiro256ss {
public:
    Xoshiro256ss() : Xoshiro256ss(0) {}

    explicit Xoshiro256ss(std::uint64_t seed) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        SplitMix64 sm(seed);
        for (auto& w : s_) w = sm.next();
    }

    std::uint64_t next() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform on [0,1), 53-bit resolution.
    double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Uniform on (0,1]; safe as a log() argument.
    double uniform01_open0() {
        return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller, two draws per variate. No cached spare so state stays a
    // pure function of the draw count.
    double normal() {
        const double u1 = uniform01_open0();
        const double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        // desk-scale n; modulo bias is negligible and determinism is what matters
        return next() % n;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::array<std::uint64_t, 4> s_{};
};

}  // namespace cdopt
