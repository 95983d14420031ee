#pragma once

#include <cstdint>
#include <random>

namespace partforge {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; decorrelates neighbouring integer seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline Rng make_rng(std::uint64_t seed) { return Rng(splitmix64(seed)); }

// Child seed for stream position `k`; distinct k give distinct seeds.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t k) { return base ^ k; }

}  // namespace partforge
