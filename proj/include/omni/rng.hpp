// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace omni {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// Named stream derived from a global seed. Consumers ("init", "augment",
// "permute", ...) get independent streams, so adding draws to one consumer
// never shifts another.
inline Rng make_stream(std::uint64_t seed, std::string_view label,
                       std::uint64_t index = 0) {
  std::uint64_t s = splitmix64(seed ^ splitmix64(fnv1a(label)));
  s = splitmix64(s + index);
  return Rng(s);
}

}  // namespace omni
