#include <atomic>

#include "mudeep/kernels/kernels.hpp"

namespace mudeep::kernels {
namespace {

std::atomic<bool> g_force_scalar{false};

bool cpu_has_avx2() noexcept {
#if defined(MUDEEP_HAVE_AVX2_KERNELS) && (defined(__GNUC__) || defined(__clang__))
  static const bool ok = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return ok;
#else
  return false;
#endif
}

}  // namespace

Isa detected_isa() noexcept { return cpu_has_avx2() ? Isa::avx2 : Isa::scalar; }

Isa active_isa() noexcept {
  if (g_force_scalar.load(std::memory_order_relaxed)) return Isa::scalar;
  return detected_isa();
}

std::string_view isa_name(Isa isa) noexcept { return isa == Isa::avx2 ? "avx2+fma" : "scalar"; }

void set_force_scalar(bool force) noexcept { g_force_scalar.store(force, std::memory_order_relaxed); }

#if defined(MUDEEP_HAVE_AVX2_KERNELS)
#define MUDEEP_PICK(fn, ...) \
  return active_isa() == Isa::avx2 ? avx2::fn(__VA_ARGS__) : scalar::fn(__VA_ARGS__)
#else
#define MUDEEP_PICK(fn, ...) return scalar::fn(__VA_ARGS__)
#endif

#define MUDEEP_DISPATCH_DEFS(T)                                                                     \
  void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,  \
            std::size_t ldb, T* c, std::size_t ldc) noexcept {                                      \
    MUDEEP_PICK(gemm, m, n, k, a, lda, b, ldb, c, ldc);                                             \
  }                                                                                                 \
  void axpy(std::size_t n, T alpha, const T* x, T* y) noexcept { MUDEEP_PICK(axpy, n, alpha, x, y); } \
  void affine(std::size_t n, T alpha, T beta, const T* x, T* y) noexcept {                          \
    MUDEEP_PICK(affine, n, alpha, beta, x, y);                                                      \
  }                                                                                                 \
  T dot(std::size_t n, const T* x, const T* y) noexcept { MUDEEP_PICK(dot, n, x, y); }              \
  T sum(std::size_t n, const T* x) noexcept { MUDEEP_PICK(sum, n, x); }                             \
  T sum_sq_dev(std::size_t n, const T* x, T mean) noexcept { MUDEEP_PICK(sum_sq_dev, n, x, mean); } \
  void relu_forward(std::size_t n, const T* x, T* y) noexcept { MUDEEP_PICK(relu_forward, n, x, y); } \
  void relu_backward(std::size_t n, const T* x, const T* dy, T* dx) noexcept {                      \
    MUDEEP_PICK(relu_backward, n, x, dy, dx);                                                       \
  }                                                                                                 \
  void mul(std::size_t n, const T* x, const T* y, T* z) noexcept { MUDEEP_PICK(mul, n, x, y, z); }

MUDEEP_DISPATCH_DEFS(float)
MUDEEP_DISPATCH_DEFS(double)

}  // namespace mudeep::kernels
