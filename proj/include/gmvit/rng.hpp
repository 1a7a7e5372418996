#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace gmvit {

namespace detail {

// FNV-1a, used only to derive substream seeds from names.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Derives independent, reproducible RNG substreams from one run seed.
/// Each consumer (init, shuffle, dropout, pose, ...) draws from its own
/// named stream, so adding a consumer never perturbs the others. Streams
/// may be further keyed by up to two indices (epoch, step), which makes
/// every step's randomness a pure function of (seed, name, epoch, step)
/// and lets checkpoint resume replay it exactly.
class RngPool {
public:
  explicit RngPool(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::mt19937_64 stream(std::string_view name, std::uint64_t a = 0, std::uint64_t b = 0) const {
    std::uint64_t h = detail::fnv1a(name);
    h = detail::splitmix64(h ^ detail::splitmix64(seed_));
    h = detail::splitmix64(h ^ detail::splitmix64(a + 0x9e3779b97f4a7c15ull));
    h = detail::splitmix64(h ^ detail::splitmix64(b + 0x7f4a7c159e3779b9ull));
    return std::mt19937_64(h);
  }

private:
  std::uint64_t seed_;
};

}  // namespace gmvit
