#pragma once

#include <cstdint>

namespace spcl {

/// Counter-based random stream: the state is a pure function of the key
/// words passed at construction, so identically-keyed streams are
/// bit-identical across runs and platforms. Uses the splitmix64 sequence.
class RandomStream {
public:
    explicit RandomStream(std::uint64_t k0, std::uint64_t k1 = 0, std::uint64_t k2 = 0,
                          std::uint64_t k3 = 0);

    std::uint64_t next_u64();

    /// Uniform in [0, 1).
    double next_double();
    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);
    /// Uniform integer in [0, n).
    int uniform_int(int n);
    bool bernoulli(double p);
    /// Standard normal (Box-Muller).
    double normal();

private:
    std::uint64_t state_;
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;
};

/// splitmix64 finalizer; used both by RandomStream and for key mixing.
std::uint64_t mix64(std::uint64_t x);

/// FNV-1a over a byte span, for golden checksums and config hashes.
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace spcl
