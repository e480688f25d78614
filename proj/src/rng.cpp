#include "spcl/rng.hpp"

#include <cmath>

namespace spcl {

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

RandomStream::RandomStream(std::uint64_t k0, std::uint64_t k1, std::uint64_t k2, std::uint64_t k3) {
    std::uint64_t s = mix64(k0);
    s = mix64(s ^ (k1 + 0x9e3779b97f4a7c15ull));
    s = mix64(s ^ (k2 + 0x7f4a7c159e3779b9ull));
    s = mix64(s ^ (k3 + 0x85ebca6b2545f491ull));
    state_ = s;
}

std::uint64_t RandomStream::next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

double RandomStream::next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RandomStream::uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

int RandomStream::uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
}

bool RandomStream::bernoulli(double p) { return next_double() < p; }

double RandomStream::normal() {
    if (has_cached_normal_) {
        has_cached_normal_ = false;
        return cached_normal_;
    }
    // Box-Muller; u1 in (0,1] to keep the log finite.
    double u1 = 1.0 - next_double();
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    cached_normal_ = r * std::sin(theta);
    has_cached_normal_ = true;
    return r * std::cos(theta);
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace spcl
