#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace muldef {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; a bijection on 64-bit words.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Independent child seed for `stream` under `seed`. Used to split one
/// experiment seed into per-model, per-sample and per-worker generators.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept;

Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0);

/// Maps 64 uniform bits onto {0, ..., n-1} by multiply-high.
std::size_t bounded_index(std::uint64_t bits, std::size_t n) noexcept;

std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng);

}  // namespace muldef
