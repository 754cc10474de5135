#include "retlab/kernels.hpp"

#include <cstdlib>
#include <stdexcept>

namespace retlab::kernels {

namespace {

Isa detect_isa() {
  if (const char* env = std::getenv("RETLAB_FORCE_SCALAR");
      env != nullptr && env[0] == '1') {
    return Isa::scalar;
  }
#if defined(RETLAB_BUILD_AVX2)
  if (cpu_has_avx2()) return Isa::avx2;
#endif
  return Isa::scalar;
}

Isa& active_isa_ref() {
  static Isa isa = detect_isa();
  return isa;
}

thread_local MacCounter* g_mac_counter = nullptr;

}  // namespace

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") != 0;
#else
  return false;
#endif
}

Isa active_isa() { return active_isa_ref(); }

void force_isa(Isa isa) {
#if defined(RETLAB_BUILD_AVX2)
  if (isa == Isa::avx2 && !cpu_has_avx2()) {
    throw std::runtime_error("force_isa: AVX2 not supported on this CPU");
  }
#else
  if (isa == Isa::avx2) {
    throw std::runtime_error("force_isa: AVX2 support not compiled in");
  }
#endif
  active_isa_ref() = isa;
}

void set_mac_counter(MacCounter* counter) { g_mac_counter = counter; }

MacCounter* mac_counter() { return g_mac_counter; }

void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate) {
  if (g_mac_counter != nullptr) {
    g_mac_counter->macs += static_cast<std::uint64_t>(m) * k * n;
  }
#if defined(RETLAB_BUILD_AVX2)
  if (active_isa_ref() == Isa::avx2) {
    detail::matmul_avx2(a, b, c, m, k, n, accumulate);
    return;
  }
#endif
  detail::matmul_scalar(a, b, c, m, k, n, accumulate);
}

void add(const double* a, const double* b, double* out, std::size_t n) {
#if defined(RETLAB_BUILD_AVX2)
  if (active_isa_ref() == Isa::avx2) {
    detail::add_avx2(a, b, out, n);
    return;
  }
#endif
  detail::add_scalar(a, b, out, n);
}

void sub(const double* a, const double* b, double* out, std::size_t n) {
#if defined(RETLAB_BUILD_AVX2)
  if (active_isa_ref() == Isa::avx2) {
    detail::sub_avx2(a, b, out, n);
    return;
  }
#endif
  detail::sub_scalar(a, b, out, n);
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
#if defined(RETLAB_BUILD_AVX2)
  if (active_isa_ref() == Isa::avx2) {
    detail::mul_avx2(a, b, out, n);
    return;
  }
#endif
  detail::mul_scalar(a, b, out, n);
}

void scale(const double* a, double c, double* out, std::size_t n) {
#if defined(RETLAB_BUILD_AVX2)
  if (active_isa_ref() == Isa::avx2) {
    detail::scale_avx2(a, c, out, n);
    return;
  }
#endif
  detail::scale_scalar(a, c, out, n);
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
#if defined(RETLAB_BUILD_AVX2)
  if (active_isa_ref() == Isa::avx2) {
    detail::axpy_avx2(alpha, x, y, n);
    return;
  }
#endif
  detail::axpy_scalar(alpha, x, y, n);
}

}  // namespace retlab::kernels
