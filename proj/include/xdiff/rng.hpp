#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace xdiff {

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);

// Seed of a named substream derived from a master seed.
std::uint64_t substream_seed(std::uint64_t master, std::string_view name);

inline Rng make_rng(std::uint64_t seed) { return Rng(splitmix64(seed)); }
inline Rng make_rng(std::uint64_t master, std::string_view name) {
  return Rng(substream_seed(master, name));
}

// Box-Muller draws independent of libstdc++ distribution internals.
double standard_normal(Rng& rng);
double uniform01(Rng& rng);

}  // namespace xdiff
