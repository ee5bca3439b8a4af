#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace kdml {

// Deterministic RNG. Floats are derived from raw mt19937 draws instead of
// std::uniform_real_distribution, whose output is implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

    uint32_t next_u32() { return gen_(); }

    // [0, 1), 24 bits of mantissa
    float uniform() {
        return static_cast<float>(next_u32() >> 8) * (1.0f / 16777216.0f);
    }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // inclusive range
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_u32() % static_cast<uint32_t>(hi - lo + 1));
    }

    // Box-Muller; consumes exactly two draws per call
    float normal() {
        float u1 = uniform();
        float u2 = uniform();
        if (u1 < 1e-12f) u1 = 1e-12f;
        return std::sqrt(-2.0f * std::log(u1)) *
               std::cos(6.28318530717958647692f * u2);
    }

    float normal(float mean, float stddev) { return mean + stddev * normal(); }

    bool bernoulli(float p) { return uniform() < p; }

private:
    std::mt19937 gen_;
};

// FNV-1a over the tag, mixed with the base seed. Gives each named consumer
// (network init, shuffle, augmentation, ...) an independent stream.
inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 1099511628211ull;
    }
    h ^= base + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
}

}  // namespace kdml
