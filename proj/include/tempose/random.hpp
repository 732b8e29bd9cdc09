#pragma once

#include <cstdint>

namespace tempose {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Independent seed for a named stream of a run (stream ids are fixed constants).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index = 0) {
  return splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index);
}

namespace streams {
inline constexpr std::uint64_t kModels = 0x6d6f64656c73ull;
inline constexpr std::uint64_t kEmbedding = 0x656d626564ull;
inline constexpr std::uint64_t kSequence = 0x736571ull;
inline constexpr std::uint64_t kInit = 0x696e6974ull;
inline constexpr std::uint64_t kEpoch = 0x65706f6368ull;
inline constexpr std::uint64_t kValidation = 0x76616cull;
}  // namespace streams

}  // namespace tempose
