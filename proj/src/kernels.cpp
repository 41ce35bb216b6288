#include "natstream/kernels.hpp"

#include <atomic>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace natstream::kernels {

namespace {
std::atomic<bool> g_parallel{true};
// Below this many multiply-adds the fork/join overhead dominates.
constexpr int64_t kParallelCutoff = 1 << 16;

inline int64_t work(int n, int k, int m) {
  return static_cast<int64_t>(n) * k * m;
}

// On a single-core machine the parallel path only adds overhead, so the
// dispatchers fall back to the serial kernels there.
inline bool multi_threaded() {
#ifdef _OPENMP
  static const bool multi = omp_get_max_threads() > 1;
  return multi;
#else
  return false;
#endif
}
}  // namespace

void set_parallel_enabled(bool on) { g_parallel.store(on); }
bool parallel_enabled() { return g_parallel.load(); }

void gemm_nn_serial(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * k;
    double* crow = c + static_cast<int64_t>(i) * m;
    for (int l = 0; l < k; ++l) {
      const double av = arow[l];
      const double* brow = b + static_cast<int64_t>(l) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nn_parallel(const double* a, const double* b, double* c, int n, int k, int m) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * k;
    double* crow = c + static_cast<int64_t>(i) * m;
    for (int l = 0; l < k; ++l) {
      const double av = arow[l];
      const double* brow = b + static_cast<int64_t>(l) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nn(const double* a, const double* b, double* c, int n, int k, int m) {
  if (g_parallel.load(std::memory_order_relaxed) && multi_threaded() && work(n, k, m) > kParallelCutoff)
    gemm_nn_parallel(a, b, c, n, k, m);
  else
    gemm_nn_serial(a, b, c, n, k, m);
}

void gemm_nt_serial(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * k;
    double* crow = c + static_cast<int64_t>(i) * m;
    for (int j = 0; j < m; ++j) {
      const double* brow = b + static_cast<int64_t>(j) * k;
      double s = 0.0;
      for (int l = 0; l < k; ++l) s += arow[l] * brow[l];
      crow[j] += s;
    }
  }
}

void gemm_nt_parallel(const double* a, const double* b, double* c, int n, int k, int m) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * k;
    double* crow = c + static_cast<int64_t>(i) * m;
    for (int j = 0; j < m; ++j) {
      const double* brow = b + static_cast<int64_t>(j) * k;
      double s = 0.0;
      for (int l = 0; l < k; ++l) s += arow[l] * brow[l];
      crow[j] += s;
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, int n, int k, int m) {
  if (g_parallel.load(std::memory_order_relaxed) && multi_threaded() && work(n, k, m) > kParallelCutoff)
    gemm_nt_parallel(a, b, c, n, k, m);
  else
    gemm_nt_serial(a, b, c, n, k, m);
}

void gemm_tn_serial(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    double* crow = c + static_cast<int64_t>(i) * m;
    for (int l = 0; l < k; ++l) {
      const double av = a[static_cast<int64_t>(l) * n + i];
      const double* brow = b + static_cast<int64_t>(l) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_tn_parallel(const double* a, const double* b, double* c, int n, int k, int m) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    double* crow = c + static_cast<int64_t>(i) * m;
    for (int l = 0; l < k; ++l) {
      const double av = a[static_cast<int64_t>(l) * n + i];
      const double* brow = b + static_cast<int64_t>(l) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, int n, int k, int m) {
  if (g_parallel.load(std::memory_order_relaxed) && multi_threaded() && work(n, k, m) > kParallelCutoff)
    gemm_tn_parallel(a, b, c, n, k, m);
  else
    gemm_tn_serial(a, b, c, n, k, m);
}

}  // namespace natstream::kernels
