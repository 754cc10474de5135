#pragma once

#include <cstddef>
#include <cstdint>

// Dense f64 inner loops. Every kernel has a scalar reference implementation
// and (on x86-64 with AVX2) a SIMD variant selected at runtime. The SIMD
// variants replicate the scalar operation order per output element, so the
// two paths produce bitwise-identical results; tests assert this.

namespace retlab::kernels {

enum class Isa { scalar, avx2 };

bool cpu_has_avx2();

// Active ISA, detected once at startup. force_isa overrides it (tests,
// RETLAB_FORCE_SCALAR=1 honours the same path); forcing an unsupported ISA
// throws.
Isa active_isa();
void force_isa(Isa isa);

// C (m x n) = A (m x k) * B (k x n), all row-major. With accumulate, adds
// into the existing C. Each C element is accumulated in ascending-k order
// with separate multiply and add roundings (no FMA).
void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate);

void add(const double* a, const double* b, double* out, std::size_t n);
void sub(const double* a, const double* b, double* out, std::size_t n);
void mul(const double* a, const double* b, double* out, std::size_t n);
void scale(const double* a, double c, double* out, std::size_t n);
// y += alpha * x
void axpy(double alpha, const double* x, double* y, std::size_t n);

// Multiply-accumulate counter. When a counter is installed (thread-local),
// matmul adds m*k*n to it. Used to instrument attention score stages.
struct MacCounter {
  std::uint64_t macs = 0;
};

void set_mac_counter(MacCounter* counter);
MacCounter* mac_counter();

class ScopedMacCounter {
 public:
  explicit ScopedMacCounter(MacCounter* counter)
      : previous_(mac_counter()) {
    set_mac_counter(counter);
  }
  ~ScopedMacCounter() { set_mac_counter(previous_); }
  ScopedMacCounter(const ScopedMacCounter&) = delete;
  ScopedMacCounter& operator=(const ScopedMacCounter&) = delete;

 private:
  MacCounter* previous_;
};

namespace detail {
void matmul_scalar(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n, bool accumulate);
void add_scalar(const double* a, const double* b, double* out, std::size_t n);
void sub_scalar(const double* a, const double* b, double* out, std::size_t n);
void mul_scalar(const double* a, const double* b, double* out, std::size_t n);
void scale_scalar(const double* a, double c, double* out, std::size_t n);
void axpy_scalar(double alpha, const double* x, double* y, std::size_t n);

#if defined(RETLAB_BUILD_AVX2)
void matmul_avx2(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n, bool accumulate);
void add_avx2(const double* a, const double* b, double* out, std::size_t n);
void sub_avx2(const double* a, const double* b, double* out, std::size_t n);
void mul_avx2(const double* a, const double* b, double* out, std::size_t n);
void scale_avx2(const double* a, double c, double* out, std::size_t n);
void axpy_avx2(double alpha, const double* x, double* y, std::size_t n);
#endif
}  // namespace detail

}  // namespace retlab::kernels
