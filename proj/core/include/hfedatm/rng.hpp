#pragma once

#include <cstdint>
#include <random>

namespace hfedatm {

// Deterministic seeded RNG. mt19937_64 has a fully specified stream, and the
// uniform/normal transforms below avoid the implementation-defined
// std::*_distribution classes, so identical seeds give identical values on
// every platform.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller (two uniforms per draw, no cached spare).
  double normal();

  // Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n);

  // Fisher-Yates shuffle of an index vector, in place.
  template <typename Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // Child RNG with a seed derived from (seed, tag words). Used to give each
  // (round, station, client) its own independent deterministic stream.
  SeededRng derive(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                   std::uint64_t d = 0) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

// splitmix64 finalizer, used for seed derivation.
std::uint64_t mix64(std::uint64_t x);

}  // namespace hfedatm
