#pragma once

// Deterministic random layer. The std engines have a fixed sequence, but the
// std distributions do not, so every draw used for corpora, shuffles, model
// init or dropout goes through the helpers below and is bit-stable across
// platforms and compilers.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace rcturn {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return x % n;
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double real01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return real01() < p; }

    // Box-Muller with a cached spare.
    double normal(double mean, double stddev) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + spare_ * stddev;
        }
        double u = 1.0 - real01(); // avoid log(0)
        double v = real01();
        double r = std::sqrt(-2.0 * std::log(u));
        double theta = 6.283185307179586 * v;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mean + r * std::cos(theta) * stddev;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i + 1));
            std::swap(v[i], v[j]);
        }
    }

    // Derive an independent deterministic stream (one per stage, step, ...).
    Rng fork(std::uint64_t stream) const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        h = (h ^ seed_) * 0x100000001b3ull;
        h = (h ^ stream) * 0x100000001b3ull;
        h ^= h >> 29;
        return Rng(h == 0 ? 0x9e3779b97f4a7c15ull : h);
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace rcturn
