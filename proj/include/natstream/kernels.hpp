#pragma once

// Dense kernels behind the tensor ops. Each GEMM variant exists twice: a
// serial reference and an OpenMP version parallelized over output rows.
// Both walk the reduction in the same order per output element, so their
// results are bitwise identical; tests assert this and tools/bench_kernels
// compares their throughput. The unsuffixed entry points dispatch by
// problem size.

namespace natstream::kernels {

// C[n,m] += A[n,k] * B[k,m]
void gemm_nn_serial(const double* a, const double* b, double* c, int n, int k, int m);
void gemm_nn_parallel(const double* a, const double* b, double* c, int n, int k, int m);
void gemm_nn(const double* a, const double* b, double* c, int n, int k, int m);

// C[n,m] += A[n,k] * B[m,k]^T
void gemm_nt_serial(const double* a, const double* b, double* c, int n, int k, int m);
void gemm_nt_parallel(const double* a, const double* b, double* c, int n, int k, int m);
void gemm_nt(const double* a, const double* b, double* c, int n, int k, int m);

// C[n,m] += A[k,n]^T * B[k,m]
void gemm_tn_serial(const double* a, const double* b, double* c, int n, int k, int m);
void gemm_tn_parallel(const double* a, const double* b, double* c, int n, int k, int m);
void gemm_tn(const double* a, const double* b, double* c, int n, int k, int m);

// Global switch consulted by the dispatching entry points.
void set_parallel_enabled(bool on);
bool parallel_enabled();

}  // namespace natstream::kernels
