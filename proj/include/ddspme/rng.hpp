#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ddspme {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stream tags so that different consumers of one seed never share draws.
enum class Stream : std::uint64_t {
  noise = 1,
  init = 2,
  probe = 3,
  bootstrap = 4,
  oracle = 5,
  user = 6,
};

// Stateless generator: every draw is a pure function of (seed, stream, key).
// Used wherever results must not depend on evaluation order or thread count.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, Stream stream)
      : base_(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(stream) * 0xd1b54a32d192ed03ULL))) {}

  std::uint64_t bits(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                     std::uint64_t d = 0) const {
    std::uint64_t h = splitmix64(base_ ^ a);
    h = splitmix64(h ^ (b * 0x9fb21c651e98df25ULL));
    h = splitmix64(h ^ (c * 0xc2b2ae3d27d4eb4fULL));
    return splitmix64(h ^ (d * 0x165667b19e3779f9ULL));
  }

  // Uniform on the open interval (0, 1).
  double uniform(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                 std::uint64_t d = 0) const {
    return (static_cast<double>(bits(a, b, c, d) >> 11) + 0.5) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller on two keyed uniforms.
  double normal(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
    const double u1 = uniform(a, b, c, 0);
    const double u2 = uniform(a, b, c, 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t base_;
};

}  // namespace ddspme
