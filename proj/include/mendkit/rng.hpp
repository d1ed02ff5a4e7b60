#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "mendkit/common.hpp"

namespace mendkit {

// Counter-based generator. Every draw is a hash of (key, counter), and a
// substream derives a fresh key from a name or index, so independent parts
// of the pipeline (dropout masks, init, batch shuffles, ...) can each own a
// stream that is reproducible from the config seed alone.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed) : key_(mix(seed ^ 0x6d656e646b6974ULL)) {}

    CounterRng substream(std::string_view name) const {
        std::uint64_t h = 0xcbf29ce484222325ULL; // FNV-1a
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        return CounterRng(FromKey{}, mix(key_ ^ h));
    }

    CounterRng substream(std::uint64_t index) const {
        return CounterRng(FromKey{}, mix(key_ ^ (0xd1b54a32d192ed03ULL * (index + 0x9e3779b97f4a7c15ULL))));
    }

    std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

    // Uniform in [0,1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform index in [0,n).
    std::size_t index(std::size_t n) {
        if (n == 0)
            throw ParameterError("CounterRng::index: n must be positive");
        return static_cast<std::size_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Standard normal via Box-Muller; the second value of each pair is cached.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        constexpr double kTwoPi = 6.283185307179586476925286766559;
        double u1 = 1.0 - uniform(); // (0,1], keeps log() finite
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        cached_ = r * std::sin(kTwoPi * u2);
        have_cached_ = true;
        return r * std::cos(kTwoPi * u2);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

private:
    struct FromKey {};
    CounterRng(FromKey, std::uint64_t key) : key_(key) {}

    // splitmix64 finalizer
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    bool have_cached_ = false;
    double cached_ = 0.0;
};

} // namespace mendkit
