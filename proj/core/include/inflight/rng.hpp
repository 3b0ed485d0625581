#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace inflight {

// splitmix64 step; also the basis for deriving per-stage seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Derives an independent stream seed from one master seed and a stage tag.
// Every randomized stage of the pipeline gets its own derived seed so stages
// can be re-run in isolation without perturbing each other.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stage);

// The helpers below avoid std::uniform_*_distribution, whose output is
// implementation-defined; mt19937_64 itself has a pinned stream, so these
// keep every randomized result reproducible across standard libraries.

inline double uniform_real(std::mt19937_64& g) {
    return static_cast<double>(g() >> 11) * 0x1.0p-53;  // [0,1)
}

inline double uniform_in(std::mt19937_64& g, double lo, double hi) {
    return lo + (hi - lo) * uniform_real(g);
}

inline std::uint64_t uniform_below(std::mt19937_64& g, std::uint64_t n) {
    // rejection sampling on the top bits, unbiased
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
        x = g();
    } while (x >= limit);
    return x % n;
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& g) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(uniform_below(g, i));
        std::swap(v[i - 1], v[j]);
    }
}

// k distinct indices drawn from {0,...,n-1}, in draw order.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, std::mt19937_64& g);

}  // namespace inflight
