// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace tokd {

using Rng = std::mt19937_64;

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Independent deterministic stream per (seed, tag, index). Used so that
/// adding components to a model does not perturb the streams of existing
/// ones (exact mode-reduction tests rely on this).
inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag,
                                 std::uint64_t index = 0) {
  return splitmix64(seed ^ splitmix64(fnv1a(tag) + 0x632be59bd9b4e019ull * (index + 1)));
}

inline Rng make_rng(std::uint64_t seed, const std::string& tag,
                    std::uint64_t index = 0) {
  return Rng(derive_seed(seed, tag, index));
}

}  // namespace tokd
