#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace cshift {

using Rng = std::mt19937_64;

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Derives a stream key from a master seed and a path of indices. Every
/// consumer of randomness (domain, epoch, sample, Monte Carlo draw) gets its
/// own key so results never depend on evaluation order or thread count.
constexpr std::uint64_t stream_key(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = detail::splitmix64(seed ^ 0x6A09E667F3BCC909ULL);
  for (std::uint64_t p : path) h = detail::splitmix64(h ^ detail::splitmix64(p + 0x3C6EF372FE94F82BULL));
  return h;
}

inline Rng substream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  return Rng(stream_key(seed, path));
}

// Stream tags, kept distinct so unrelated consumers never share a key.
namespace tag {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t shuffle = 2;
inline constexpr std::uint64_t augment = 3;
inline constexpr std::uint64_t attack = 4;
inline constexpr std::uint64_t select = 5;
inline constexpr std::uint64_t estimate = 6;
inline constexpr std::uint64_t domain = 7;
inline constexpr std::uint64_t split = 8;
inline constexpr std::uint64_t invariance = 9;
inline constexpr std::uint64_t trades = 10;
}  // namespace tag

}  // namespace cshift
