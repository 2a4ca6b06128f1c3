#pragma once
#include <cmath>
#include <cstdint>

namespace wb {

// Counter-based splitmix64 generator. Unlike std::normal_distribution, the
// output stream depends only on (seed, call sequence), so results are
// bit-identical across platforms and standard library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Box-Muller; consumes exactly two uniforms per call.
  double next_normal() {
    double u1 = next_uniform();
    double u2 = next_uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  // Deterministic sub-stream: same (seed, tag) always yields the same stream.
  Rng fork(uint64_t tag) const {
    Rng r(state_ ^ (0x9e3779b97f4a7c15ULL * (tag + 1)));
    r.next_u64();
    return r;
  }

 private:
  uint64_t state_;
};

}  // namespace wb
