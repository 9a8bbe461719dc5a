#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace phqfuse {

inline constexpr std::uint64_t kDefaultSeed = 42;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed for a named sub-stream ("init", "shuffle", "dropout", "sampling", ...)
/// of the global seed. Streams are independent of the order they are created.
inline std::uint64_t substream_seed(std::uint64_t seed, std::string_view name,
                                    std::uint64_t index = 0) {
  return splitmix64(seed ^ splitmix64(fnv1a(name) + index));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0) {
  return Rng(substream_seed(seed, stream, index));
}

}  // namespace phqfuse
