#include "natstream/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace natstream {

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int Rng::uniform_int(int n) {
  if (n <= 0) throw std::runtime_error("Rng::uniform_int: n must be positive");
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t bound = UINT64_MAX - UINT64_MAX % un;
  uint64_t x = next_u64();
  while (x >= bound) x = next_u64();
  return static_cast<int>(x % un);
}

uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng Rng::fork(uint64_t stream) const {
  return Rng(mix64(seed_ ^ mix64(stream + 1)));
}

}  // namespace natstream
