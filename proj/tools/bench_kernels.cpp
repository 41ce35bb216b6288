// Compares the serial and OpenMP matrix-multiply kernels at several sizes,
// checks that their outputs are bitwise identical, and reports throughput.
#include <chrono>
#include <cstdio>
#include <cstring>
#include <vector>

#include "natstream/kernels.hpp"
#include "natstream/rng.hpp"

namespace {

using natstream::Rng;
namespace kernels = natstream::kernels;

double time_gemm(void (*fn)(const double*, const double*, double*, int, int, int),
                 const std::vector<double>& a, const std::vector<double>& b,
                 std::vector<double>& c, int n, int k, int m, int reps) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    std::fill(c.begin(), c.end(), 0.0);
    auto t0 = std::chrono::steady_clock::now();
    fn(a.data(), b.data(), c.data(), n, k, m);
    auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

}  // namespace

int main() {
  Rng rng(20240817);
  const int sizes[] = {64, 128, 256, 512};
  std::printf("%8s %14s %14s %10s %10s\n", "size", "serial GF/s", "parallel GF/s", "speedup",
              "bitwise");
  for (int s : sizes) {
    const int n = s, k = s, m = s;
    std::vector<double> a(static_cast<size_t>(n) * k), b(static_cast<size_t>(k) * m);
    for (double& x : a) x = rng.normal();
    for (double& x : b) x = rng.normal();
    std::vector<double> c_serial(static_cast<size_t>(n) * m), c_parallel(c_serial.size());
    const int reps = s <= 128 ? 5 : 3;
    const double flops = 2.0 * n * k * m;
    const double ts = time_gemm(kernels::gemm_nn_serial, a, b, c_serial, n, k, m, reps);
    const double tp = time_gemm(kernels::gemm_nn_parallel, a, b, c_parallel, n, k, m, reps);
    const bool same =
        std::memcmp(c_serial.data(), c_parallel.data(), c_serial.size() * sizeof(double)) == 0;
    std::printf("%8d %14.2f %14.2f %9.2fx %10s\n", s, flops / ts / 1e9, flops / tp / 1e9, ts / tp,
                same ? "yes" : "NO");
    if (!same) return 1;
  }
  return 0;
}
