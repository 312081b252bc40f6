#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace fmtd {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Child seed for stream `index` under `parent`. Distinct indices give unrelated streams.
inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index) {
  return splitmix64(splitmix64(parent) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

// Stream tags used when deriving component seeds from one run seed.
enum class stream : std::uint64_t {
  init = 1,
  shuffle = 2,
  dropout = 3,
  perturb = 4,
  split = 5,
  attack_bases = 6,
  serial_order = 7,
  synthetic = 8,
  forks = 9,
};

inline std::uint64_t derive_seed(std::uint64_t parent, stream s) {
  return derive_seed(parent, static_cast<std::uint64_t>(s));
}

/// Uniform double in [0, 1) from 53 random bits; portable across standard libraries.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Fisher-Yates with `uniform01`, so permutations are identical on every platform.
inline std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
  }
  return idx;
}

}  // namespace fmtd
