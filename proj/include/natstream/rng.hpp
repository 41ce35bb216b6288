#pragma once

#include <cstdint>
#include <random>

namespace natstream {

// Seeded pseudorandom source. The core generator is std::mt19937_64, whose
// raw output sequence is fixed by the C++ standard, so a given seed yields
// the same stream of draws on every platform. Variate transforms are
// implemented here instead of with std::*_distribution, which are not
// portable across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), gen_(seed) {}

  uint64_t seed() const { return seed_; }
  uint64_t next_u64() { return gen_(); }

  // Uniform double in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller (cosine branch only, no cached state).
  double normal();

  // Uniform integer in [0, n), n >= 1, via rejection sampling.
  int uniform_int(int n);

  // Derives an independent generator for a named substream. Forking with the
  // same (seed, stream) pair always yields the same child.
  Rng fork(uint64_t stream) const;

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
};

// SplitMix64 finalizer, used for seed derivation and content hashing.
uint64_t mix64(uint64_t x);

}  // namespace natstream
