#include "retlab/kernels.hpp"

#include <cstring>
#include <immintrin.h>

// AVX2 variants. Lane arithmetic is plain IEEE multiply/add (no FMA), and
// every output element sees the same operation sequence as the scalar
// reference, so results are bitwise identical to kernels_scalar.cpp.

namespace retlab::kernels::detail {

void matmul_avx2(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n, bool accumulate) {
  const std::size_t n4 = n - n % 4;
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!accumulate) {
      std::memset(crow, 0, n * sizeof(double));
    }
    const double* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      const double* brow = b + kk * n;
      const __m256d av = _mm256_set1_pd(aik);
      std::size_t j = 0;
      for (; j < n4; j += 4) {
        const __m256d bv = _mm256_loadu_pd(brow + j);
        const __m256d cv = _mm256_loadu_pd(crow + j);
        _mm256_storeu_pd(crow + j, _mm256_add_pd(cv, _mm256_mul_pd(av, bv)));
      }
      for (; j < n; ++j) {
        crow[j] += aik * brow[j];
      }
    }
  }
}

void add_avx2(const double* a, const double* b, double* out, std::size_t n) {
  const std::size_t n4 = n - n % 4;
  std::size_t i = 0;
  for (; i < n4; i += 4) {
    _mm256_storeu_pd(out + i,
                     _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_avx2(const double* a, const double* b, double* out, std::size_t n) {
  const std::size_t n4 = n - n % 4;
  std::size_t i = 0;
  for (; i < n4; i += 4) {
    _mm256_storeu_pd(out + i,
                     _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_avx2(const double* a, const double* b, double* out, std::size_t n) {
  const std::size_t n4 = n - n % 4;
  std::size_t i = 0;
  for (; i < n4; i += 4) {
    _mm256_storeu_pd(out + i,
                     _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_avx2(const double* a, double c, double* out, std::size_t n) {
  const __m256d cv = _mm256_set1_pd(c);
  const std::size_t n4 = n - n % 4;
  std::size_t i = 0;
  for (; i < n4; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), cv));
  }
  for (; i < n; ++i) out[i] = a[i] * c;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d av = _mm256_set1_pd(alpha);
  const std::size_t n4 = n - n % 4;
  std::size_t i = 0;
  for (; i < n4; i += 4) {
    const __m256d xv = _mm256_loadu_pd(x + i);
    const __m256d yv = _mm256_loadu_pd(y + i);
    _mm256_storeu_pd(y + i, _mm256_add_pd(yv, _mm256_mul_pd(av, xv)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace retlab::kernels::detail
