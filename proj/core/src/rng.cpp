#include "hfedatm/rng.hpp"

#include <cmath>
#include <numbers>

namespace hfedatm {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double SeededRng::normal() {
  // u1 in (0,1] so the log is finite.
  double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
  double u2 = uniform01();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t SeededRng::uniform_index(std::size_t n) {
  if (n == 0) return 0;
  // Rejection sampling keeps the draw unbiased for any n.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<std::size_t>(x % n);
}

SeededRng SeededRng::derive(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                            std::uint64_t d) const {
  std::uint64_t s = seed_;
  s = mix64(s ^ mix64(a));
  s = mix64(s ^ mix64(b));
  s = mix64(s ^ mix64(c));
  s = mix64(s ^ mix64(d));
  return SeededRng(s);
}

}  // namespace hfedatm
