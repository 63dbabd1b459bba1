#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

// Self-contained deterministic random pipeline: xoshiro256++ seeded via
// splitmix64, Box-Muller for normals. The exact algorithms are part of the
// artifact's reproducibility contract (same seed, same bytes, any platform),
// which is why <random> distributions are not used here.

namespace dq {

struct SplitMix64 {
  std::uint64_t state;

  explicit SplitMix64(std::uint64_t seed) : state(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
};

class Xoshiro256pp {
public:
  explicit Xoshiro256pp(std::uint64_t seed) {
    SplitMix64 sm(seed);
    for (auto& w : s_) w = sm.next();
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform on (0, 1]; never returns 0 so log() is always safe.
  double uniform01() {
    return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;
  }

  // Uniform on [lo, hi).
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t s_[4];
};

// Standard normal draws; generates Box-Muller pairs and caches the second.
class NormalGen {
public:
  explicit NormalGen(std::uint64_t seed) : rng_(seed) {}

  double next() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    const double u1 = rng_.uniform01();
    const double u2 = rng_.uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

private:
  Xoshiro256pp rng_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

inline std::vector<double> gaussian_vector(std::uint64_t seed, std::size_t n) {
  NormalGen gen(seed);
  std::vector<double> out(n);
  for (auto& x : out) x = gen.next();
  return out;
}

}  // namespace dq
