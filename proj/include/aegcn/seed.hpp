#pragma once

#include <cstdint>

namespace aegcn {

// Independent, reproducible sub-seeds from one run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ stream) ^ index);
}

namespace streams {
inline constexpr std::uint64_t extractor_init = 1;
inline constexpr std::uint64_t extractor_shuffle = 2;
inline constexpr std::uint64_t extractor_augment = 3;
inline constexpr std::uint64_t gcn_init = 4;
inline constexpr std::uint64_t gcn_dropout = 5;
inline constexpr std::uint64_t synth = 6;
}  // namespace streams

}  // namespace aegcn
