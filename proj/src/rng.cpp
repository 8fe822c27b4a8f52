#include "muldef/rng.hpp"

#include <algorithm>
#include <numeric>

namespace muldef {

std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    return mix64(mix64(seed) ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

Rng make_rng(std::uint64_t seed, std::uint64_t stream) { return Rng(derive_seed(seed, stream)); }

std::size_t bounded_index(std::uint64_t bits, std::size_t n) noexcept {
    return static_cast<std::size_t>((static_cast<unsigned __int128>(bits) * n) >> 64);
}

std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // Fisher-Yates with bounded_index so the result does not depend on the
    // standard library's shuffle implementation.
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[bounded_index(rng(), i)]);
    return idx;
}

}  // namespace muldef
