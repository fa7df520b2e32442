#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "ademvl/tensor.hpp"

namespace ademvl {

// Seeded generator with distribution code of our own, so streams are
// identical across standard libraries (std:: distributions are not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  Real uniform() { return static_cast<Real>(engine_() >> 11) * 0x1.0p-53; }

  Real uniform(Real lo, Real hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection sampling keeps the distribution exact.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  Real normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    Real u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const Real u2 = uniform();
    const Real r = std::sqrt(-2.0 * std::log(u1));
    const Real t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  Tensor normal_tensor(Shape shape, Real stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = stddev * normal();
    return t;
  }

  Tensor uniform_tensor(Shape shape, Real lo, Real hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = uniform(lo, hi);
    return t;
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  Real spare_ = 0.0;
};

// Stable derivation of independent sub-seeds (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace ademvl
