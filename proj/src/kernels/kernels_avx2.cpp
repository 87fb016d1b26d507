// Compiled with -mavx2 (no FMA): every lane performs the same mul-then-add
// sequence as the scalar reference, so results are bit-identical.
#include "dagmesh/kernels.hpp"

#include <immintrin.h>

#include <vector>

namespace dagmesh::kernels::avx2 {
namespace {

// row[0..n) += alpha * b[0..n)
inline void row_axpy(double alpha, const double* b, double* row, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    __m256d r = _mm256_loadu_pd(row + j);
    __m256d prod = _mm256_mul_pd(va, _mm256_loadu_pd(b + j));
    _mm256_storeu_pd(row + j, _mm256_add_pd(r, prod));
  }
  for (; j < n; ++j) row[j] += alpha * b[j];
}

inline void store_row(const double* tmp, double* c, std::size_t n, bool accumulate) {
  if (!accumulate) {
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) _mm256_storeu_pd(c + j, _mm256_loadu_pd(tmp + j));
    for (; j < n; ++j) c[j] = tmp[j];
    return;
  }
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4)
    _mm256_storeu_pd(c + j, _mm256_add_pd(_mm256_loadu_pd(c + j), _mm256_loadu_pd(tmp + j)));
  for (; j < n; ++j) c[j] = c[j] + tmp[j];
}

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  std::vector<double> tmp(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(tmp.begin(), tmp.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) row_axpy(a[i * k + p], b + p * n, tmp.data(), n);
    store_row(tmp.data(), c + i * n, n, accumulate);
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  // Transpose B once so the inner update runs over contiguous output columns.
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  std::vector<double> tmp(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(tmp.begin(), tmp.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) row_axpy(a[p * m + i], b + p * n, tmp.data(), n);
    store_row(tmp.data(), c + i * n, n, accumulate);
  }
}

void add(const double* x, const double* y, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) out[i] = x[i] + y[i];
}

void mul(const double* x, const double* y, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) out[i] = x[i] * y[i];
}

void scale(double alpha, const double* x, double* out, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

void axpy(double alpha, const double* x, double* y, std::size_t n) { row_axpy(alpha, x, y, n); }

void col_sum(const double* a, double* out, std::size_t rows, std::size_t cols, bool accumulate) {
  std::vector<double> tmp(cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = a + i * cols;
    std::size_t j = 0;
    for (; j + 4 <= cols; j += 4)
      _mm256_storeu_pd(tmp.data() + j,
                       _mm256_add_pd(_mm256_loadu_pd(tmp.data() + j), _mm256_loadu_pd(row + j)));
    for (; j < cols; ++j) tmp[j] += row[j];
  }
  store_row(tmp.data(), out, cols, accumulate);
}

}  // namespace

const KernelTable& table() {
  static const KernelTable t{"avx2", gemm_nn, gemm_nt, gemm_tn, add, mul, scale, axpy, col_sum};
  return t;
}

}  // namespace dagmesh::kernels::avx2
