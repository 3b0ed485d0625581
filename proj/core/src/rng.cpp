#include "inflight/rng.hpp"

namespace inflight {

std::uint64_t derive_seed(std::uint64_t master, std::string_view stage) {
    // FNV-1a over the tag, mixed with the master through splitmix64.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : stage) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::uint64_t state = master ^ h;
    return splitmix64(state);
}

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, std::mt19937_64& g) {
    // Partial Fisher-Yates over an index array.
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::vector<std::size_t> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k && i < n; ++i) {
        std::size_t j = i + static_cast<std::size_t>(uniform_below(g, n - i));
        std::swap(idx[i], idx[j]);
        out.push_back(idx[i]);
    }
    return out;
}

}  // namespace inflight
