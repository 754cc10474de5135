#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <vector>

#include "retlab/kernels.hpp"
#include "retlab/rng.hpp"

using namespace retlab;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  rng::Stream stream(seed);
  std::vector<double> v(n);
  for (double& x : v) x = stream.next_uniform(-2.0, 2.0);
  return v;
}

// ijk oracle: per-element left-to-right sum over k, written at the end.
std::vector<double> naive_matmul(const std::vector<double>& a,
                                 const std::vector<double>& b, std::size_t m,
                                 std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double sum = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) {
        sum += a[i * k + kk] * b[kk * n + j];
      }
      c[i * n + j] = sum;
    }
  }
  return c;
}

struct IsaGuard {
  kernels::Isa saved;
  IsaGuard() : saved(kernels::active_isa()) {}
  ~IsaGuard() { kernels::force_isa(saved); }
};

}  // namespace

TEST_CASE("matmul matches the naive triple-loop oracle bitwise") {
  for (std::size_t m : {1, 3, 16}) {
    for (std::size_t k : {1, 5, 16}) {
      for (std::size_t n : {1, 4, 7, 16}) {
        const std::vector<double> a = random_vec(m * k, 1000 + m * 100 + k);
        const std::vector<double> b = random_vec(k * n, 2000 + k * 100 + n);
        std::vector<double> c(m * n, -7.0);
        kernels::matmul(a.data(), b.data(), c.data(), m, k, n, false);
        const std::vector<double> oracle = naive_matmul(a, b, m, k, n);
        CHECK(std::memcmp(c.data(), oracle.data(), c.size() * sizeof(double)) == 0);
      }
    }
  }
}

TEST_CASE("matmul identity cases") {
  const std::vector<double> a = {1, 2, 3, 4};
  const std::vector<double> eye = {1, 0, 0, 1};
  std::vector<double> c(4, 0.0);
  kernels::matmul(a.data(), eye.data(), c.data(), 2, 2, 2, false);
  CHECK(c == a);

  const std::vector<double> col = {5, 7};
  std::vector<double> c2(2, 0.0);
  kernels::matmul(eye.data(), col.data(), c2.data(), 2, 2, 1, false);
  CHECK(c2 == col);

  const std::vector<double> ones = {1, 1, 1, 1};
  std::vector<double> c3(4, 0.0);
  kernels::matmul(a.data(), ones.data(), c3.data(), 2, 2, 2, false);
  CHECK(c3 == std::vector<double>({3, 3, 7, 7}));
}

TEST_CASE("scalar and AVX2 paths are bitwise identical") {
  if (!kernels::cpu_has_avx2()) {
    MESSAGE("AVX2 unavailable; equivalence trivially holds on the scalar path");
    return;
  }
  IsaGuard guard;
  for (std::size_t trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + trial % 7;
    const std::size_t k = 1 + (trial * 3) % 11;
    const std::size_t n = 1 + (trial * 5) % 13;
    const std::vector<double> a = random_vec(m * k, 31 + trial);
    const std::vector<double> b = random_vec(k * n, 57 + trial);

    kernels::force_isa(kernels::Isa::scalar);
    std::vector<double> c_scalar(m * n, 0.0);
    kernels::matmul(a.data(), b.data(), c_scalar.data(), m, k, n, false);

    kernels::force_isa(kernels::Isa::avx2);
    std::vector<double> c_avx(m * n, 0.0);
    kernels::matmul(a.data(), b.data(), c_avx.data(), m, k, n, false);

    CHECK(std::memcmp(c_scalar.data(), c_avx.data(), c_avx.size() * sizeof(double)) ==
          0);

    // accumulate variant
    std::vector<double> acc_scalar = random_vec(m * n, 91 + trial);
    std::vector<double> acc_avx = acc_scalar;
    kernels::force_isa(kernels::Isa::scalar);
    kernels::matmul(a.data(), b.data(), acc_scalar.data(), m, k, n, true);
    kernels::force_isa(kernels::Isa::avx2);
    kernels::matmul(a.data(), b.data(), acc_avx.data(), m, k, n, true);
    CHECK(std::memcmp(acc_scalar.data(), acc_avx.data(),
                      acc_avx.size() * sizeof(double)) == 0);

    // elementwise kernels
    const std::size_t len = 1 + (trial * 7) % 19;
    const std::vector<double> x = random_vec(len, 111 + trial);
    const std::vector<double> y = random_vec(len, 131 + trial);
    std::vector<double> r1(len), r2(len);
    kernels::force_isa(kernels::Isa::scalar);
    kernels::add(x.data(), y.data(), r1.data(), len);
    kernels::force_isa(kernels::Isa::avx2);
    kernels::add(x.data(), y.data(), r2.data(), len);
    CHECK(r1 == r2);

    kernels::force_isa(kernels::Isa::scalar);
    kernels::mul(x.data(), y.data(), r1.data(), len);
    kernels::force_isa(kernels::Isa::avx2);
    kernels::mul(x.data(), y.data(), r2.data(), len);
    CHECK(r1 == r2);

    std::vector<double> y1 = y, y2 = y;
    kernels::force_isa(kernels::Isa::scalar);
    kernels::axpy(0.37, x.data(), y1.data(), len);
    kernels::force_isa(kernels::Isa::avx2);
    kernels::axpy(0.37, x.data(), y2.data(), len);
    CHECK(y1 == y2);
  }
}

TEST_CASE("mac counter tracks matmul work") {
  kernels::MacCounter counter;
  {
    kernels::ScopedMacCounter guard(&counter);
    const std::vector<double> a(6, 1.0), b(12, 1.0);
    std::vector<double> c(8, 0.0);
    kernels::matmul(a.data(), b.data(), c.data(), 2, 3, 4, false);
  }
  CHECK(counter.macs == 2 * 3 * 4);
  // counter detached: further work does not count
  const std::vector<double> a(4, 1.0), b(4, 1.0);
  std::vector<double> c(4, 0.0);
  kernels::matmul(a.data(), b.data(), c.data(), 2, 2, 2, false);
  CHECK(counter.macs == 2 * 3 * 4);
}
