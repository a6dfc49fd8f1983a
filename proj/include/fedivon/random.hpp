#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace fedivon {

using Rng = std::mt19937_64;

namespace detail {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t hash_label(std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Labelled seed derivation. Every random stream in the library is obtained
/// from the experiment's root seed through a purpose label and a list of
/// integer coordinates (round, client id, ...), so no two consumers ever
/// share a stream and no global random state exists.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose,
                                 std::initializer_list<std::uint64_t> coords = {}) {
  std::uint64_t h = detail::splitmix64(root ^ detail::hash_label(purpose));
  for (std::uint64_t c : coords) h = detail::splitmix64(h ^ detail::splitmix64(c));
  return h;
}

inline Rng make_rng(std::uint64_t root, std::string_view purpose,
                    std::initializer_list<std::uint64_t> coords = {}) {
  return Rng(derive_seed(root, purpose, coords));
}

inline double standard_normal(Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

}  // namespace fedivon
