// Counter-based random streams.
//
// Every random decision in the library is drawn from a stream keyed by a
// (seed, purpose, indices...) tuple, so results do not depend on batch
// order, thread count, or evaluation order.  Streams are cheap value types:
// deriving one is two integer mixes.

#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace qjfuse::rng {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix(uint64_t a, uint64_t b) {
    return splitmix64(a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2)));
}

inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Stateless counter stream: the n-th draw is a pure function of (key, n).
class Stream {
public:
    Stream() = default;
    explicit Stream(uint64_t key) : key_(key) {}

    // Derivation helpers; each returns a new independent stream.
    Stream child(uint64_t index) const { return Stream(mix(key_, index)); }
    Stream child(std::string_view tag) const { return Stream(mix(key_, hash_str(tag))); }

    uint64_t next_u64() { return splitmix64(key_ + 0x632be59bd9b4e019ULL * ++counter_); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller (consumes two uniforms).
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        // Guard against log(0).
        if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n) via 128-bit multiply (n > 0).
    uint64_t below(uint64_t n) {
        return static_cast<uint64_t>(
            (static_cast<__uint128_t>(next_u64()) * static_cast<__uint128_t>(n)) >> 64);
    }

    uint64_t key() const { return key_; }

private:
    uint64_t key_ = 0;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// In-place Fisher-Yates shuffle.
template <typename T>
void shuffle(std::vector<T>& v, Stream s) {
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(s.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

} // namespace qjfuse::rng
