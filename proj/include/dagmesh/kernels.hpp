#pragma once

// Dense inner loops of the reference executor.
//
// Every variant must produce bit-identical results to the scalar reference:
// reductions accumulate in ascending index order starting from 0.0, and SIMD
// variants only vectorise across the contiguous output index.

#include <cstddef>
#include <string_view>

namespace dagmesh::kernels {

struct KernelTable {
  const char* name;

  // C[m,n] = A[m,k] * B[k,n]            (accumulate: C += ...)
  void (*gemm_nn)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accumulate);
  // C[m,n] = A[m,k] * B[n,k]^T
  void (*gemm_nt)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accumulate);
  // C[m,n] = A[k,m]^T * B[k,n]
  void (*gemm_tn)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accumulate);

  void (*add)(const double* x, const double* y, double* out, std::size_t n);
  void (*mul)(const double* x, const double* y, double* out, std::size_t n);
  // out = alpha * x
  void (*scale)(double alpha, const double* x, double* out, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // out[j] = sum_i a[i, j]                (accumulate: out += ...)
  void (*col_sum)(const double* a, double* out, std::size_t rows,
                  std::size_t cols, bool accumulate);
};

const KernelTable& scalar_table();

/// nullptr when the AVX2 unit was not compiled in or the CPU lacks AVX2.
const KernelTable* avx2_table();

/// Table used by the executor. Picks AVX2 when available unless the
/// DAGMESH_KERNELS environment variable is set to "scalar".
const KernelTable& active();

/// Overrides the runtime choice ("scalar" or "avx2"). Returns false if the
/// requested variant is unavailable.
bool select(std::string_view name);

}  // namespace dagmesh::kernels
