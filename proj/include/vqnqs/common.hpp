#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace vqnqs {

// Error taxonomy: configuration problems (bad dims, bad couplings, bad file
// contents), shape mismatches in the numeric core, capability limits
// (system too large), numerical failures (non-convergence, NaN), and
// API misuse.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct CapabilityError : std::runtime_error {
  explicit CapabilityError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

inline void check(bool cond, const char* msg) {
  if (!cond) throw ShapeError(msg);
}

// splitmix64 finalizer; used both for seed derivation and identity-key
// chaining in the dedup engine.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t seed, uint64_t v) {
  return mix64(seed ^ (v + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2)));
}

}  // namespace vqnqs
