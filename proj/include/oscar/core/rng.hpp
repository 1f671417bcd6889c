#pragma once
#include <vector>

#include <cstdint>
#include <random>
#include <string>

namespace oscar {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_str64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// All randomness in a run flows from one root seed. Child streams are derived
// deterministically from (seed, label) so stages cannot perturb each other.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::mt19937_64& engine() { return engine_; }

    Rng child(const std::string& label) const {
        return Rng(splitmix64(seed_ ^ hash_str64(label)));
    }
    Rng child(std::uint64_t index) const {
        return Rng(splitmix64(seed_ ^ splitmix64(index + 0x51ed2700a1b2c3d4ULL)));
    }

    double uniform(double lo = 0.0, double hi = 1.0) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(engine_);
    }
    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(engine_);
    }
    double gamma(double shape, double scale) {
        std::gamma_distribution<double> d(shape, scale);
        return d(engine_);
    }
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {  // inclusive
        std::uniform_int_distribution<std::int64_t> d(lo, hi);
        return d(engine_);
    }
    bool bernoulli(double p) {
        std::bernoulli_distribution d(p);
        return d(engine_);
    }
    std::uint64_t next_u64() { return engine_(); }

    // Fisher–Yates, independent of std::shuffle's unspecified ordering
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            auto j = static_cast<std::size_t>(
                uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace oscar
