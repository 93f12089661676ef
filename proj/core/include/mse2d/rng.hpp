#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mse2d {

using Rng = std::mt19937_64;

// 64-bit FNV-1a. Used for token hashing and stream derivation; the value is
// part of the on-disk contract (token ids), so it must never change.
constexpr std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (char c : text) {
    hash ^= static_cast<std::uint8_t>(c);
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent named sub-stream ("init", "data", "sampling", ...) of one seed.
inline Rng make_stream(std::uint64_t seed, std::string_view name) {
  return Rng(splitmix64(seed ^ fnv1a64(name)));
}

}  // namespace mse2d
