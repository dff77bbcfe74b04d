#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace rkhs {

using Rng = std::mt19937_64;

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derives a child seed from a root seed and a path of integer keys. The
// result depends only on (root, keys), never on evaluation order, so work
// items can be executed in any order or in parallel.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t state = mix64(root);
  for (std::uint64_t k : keys) state = mix64(state ^ mix64(k + 0x632be59bd9b4e019ULL));
  return state;
}

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

}  // namespace rkhs
