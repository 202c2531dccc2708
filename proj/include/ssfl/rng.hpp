#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <vector>

#include "ssfl/errors.hpp"

namespace ssfl {

// Counter-derived random streams. The standard <random> distributions are
// implementation-defined, so everything here is spelled out to keep runs
// bit-reproducible across compilers and independent of execution order.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// xoshiro256** engine, seeded from an arbitrary tuple of 64-bit tags.
class RngStream {
public:
    RngStream() : RngStream({0}) {}

    explicit RngStream(std::initializer_list<std::uint64_t> tags) {
        std::uint64_t acc = 0x853c49e6748fea9bULL;
        for (std::uint64_t t : tags) acc = splitmix64(acc ^ t);
        for (auto& word : state_) {
            acc = splitmix64(acc);
            word = acc;
        }
        if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, bound), bias-free via rejection.
    std::uint64_t uniform_u64(std::uint64_t bound) {
        if (bound == 0) throw InvalidInputError("uniform_u64: bound must be positive");
        const std::uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    int uniform_int(int lo, int hi_inclusive) {
        if (hi_inclusive < lo) throw InvalidInputError("uniform_int: empty range");
        const auto span = static_cast<std::uint64_t>(hi_inclusive) - static_cast<std::uint64_t>(lo) + 1;
        return lo + static_cast<int>(uniform_u64(span));
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return uniform_double() < p; }

    // Box-Muller; the spare value is cached, so normals are consumed in pairs.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform_double();
        while (u1 <= 0.0) u1 = uniform_double();
        const double u2 = uniform_double();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        spare_ = mag * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return mag * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& values) {
        for (std::size_t i = values.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_u64(i));
            std::swap(values[i - 1], values[j]);
        }
    }

    // First `count` entries of a Fisher-Yates pass over [0, n): a uniform
    // sample without replacement, in draw order.
    std::vector<int> sample_without_replacement(int n, int count) {
        if (count < 0 || count > n) throw InvalidInputError("sample_without_replacement: count out of range");
        std::vector<int> ids(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
        for (int i = 0; i < count; ++i) {
            const int j = i + static_cast<int>(uniform_u64(static_cast<std::uint64_t>(n - i)));
            std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
        }
        ids.resize(static_cast<std::size_t>(count));
        return ids;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t state_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stream-purpose tags. Streams for different purposes never overlap, so
// adding a consumer (e.g. the grouping shuffle) cannot shift any other draw.
namespace stream_tag {
inline constexpr std::uint64_t kPartition = 0x70617274ULL;    // "part"
inline constexpr std::uint64_t kInit = 0x696e6974ULL;         // "init"
inline constexpr std::uint64_t kParticipants = 0x73616d70ULL; // "samp"
inline constexpr std::uint64_t kGroups = 0x67727570ULL;       // "grup"
inline constexpr std::uint64_t kUserStep = 0x75736572ULL;     // "user"
inline constexpr std::uint64_t kServerStep = 0x73727672ULL;   // "srvr"
inline constexpr std::uint64_t kDataset = 0x64617461ULL;      // "data"
} // namespace stream_tag

} // namespace ssfl
