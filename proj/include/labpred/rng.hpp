#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace labpred {

// Self-contained splitmix64 generator. Dataset generation, weight init and
// shuffling all flow through this class so that runs reproduce bit-for-bit
// across platforms; std::mt19937 plus std::*_distribution would not, because
// the distributions are implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be positive. The modulo bias is below
    // n / 2^64, which is irrelevant next to the reproducibility we get from
    // keeping the mapping trivial.
    uint64_t below(uint64_t n) { return next_u64() % n; }

    // Uniform integer in [lo, hi] inclusive.
    int64_t range(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo + 1)));
    }

    // Standard normal via Box-Muller; the spare value is cached.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();  // log(0) guard
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double gaussian(double mu, double sigma) { return mu + sigma * gaussian(); }

    // Fisher-Yates, descending index order.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// FNV-1a over a byte string.
inline uint64_t fnv1a64(std::string_view bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Derives an independent stream seed from a master seed, a purpose tag and an
// index, so that e.g. the per-stay generator streams and the per-epoch
// shuffle order never collide.
inline uint64_t derive_seed(uint64_t master, std::string_view purpose, uint64_t index = 0) {
    uint64_t h = fnv1a64(purpose);
    // splitmix64 finalizer over the combined words
    uint64_t z = master ^ (h + 0x9e3779b97f4a7c15ull * (index + 1));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace labpred
