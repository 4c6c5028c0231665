#pragma once

#include <cstdint>
#include <string_view>

namespace gfe {

constexpr std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// splitmix64 finalizer; used to spread FNV output and to derive per-stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stable 64-bit hash of an external entity id. Partition = stable_id_hash(id) % P.
constexpr std::uint64_t stable_id_hash(std::string_view id) { return mix64(fnv1a64(id)); }

// Combines a base seed with stream identifiers (epoch, bucket, worker, ...).
template <typename... Parts>
constexpr std::uint64_t derive_seed(std::uint64_t base, Parts... parts) {
  std::uint64_t h = mix64(base);
  ((h = mix64(h ^ static_cast<std::uint64_t>(parts))), ...);
  return h;
}

}  // namespace gfe
