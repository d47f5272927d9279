#pragma once

#include <cstdint>
#include <random>

#include "vqnqs/common.hpp"

namespace vqnqs {

// Seeded RNG with explicit stream splitting. Child streams are derived as
// mix64(master ^ mix64(stream_id)), so any (seed, stream) pair names a
// reproducible stream independent of call order elsewhere. Transforms are
// hand-rolled (not std::*_distribution) so sequences are stable across
// standard-library implementations within one build.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), gen_(mix64(seed)) {}

  uint64_t u64() { return gen_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  uint64_t below(uint64_t n) { return u64() % n; }

  // standard normal via Box-Muller (one value per call, cached pair)
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  Rng split(uint64_t stream) const { return Rng(mix64(seed_ ^ mix64(stream))); }

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vqnqs
