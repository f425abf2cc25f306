#pragma once

// Inner-loop arithmetic used by every differentiable op. Each routine has a
// portable scalar reference (kernels::scalar) and, on x86-64, an AVX2+FMA
// variant (kernels::avx2). The public entry points below dispatch at runtime
// to the best variant the CPU supports unless scalar mode is forced.
//
// Every routine keeps a fixed per-element reduction order that does not depend
// on where an element sits inside the operand (row tails and column tails use
// the same instruction sequence as full tiles). Results are therefore bitwise
// reproducible for a given variant, independent of batch position.

#include <cstddef>
#include <string_view>

namespace mudeep::kernels {

enum class Isa { scalar, avx2 };

// Best ISA compiled in and supported by the running CPU.
Isa detected_isa() noexcept;
// ISA actually used by the dispatching entry points.
Isa active_isa() noexcept;
std::string_view isa_name(Isa isa) noexcept;
void set_force_scalar(bool force) noexcept;

#define MUDEEP_KERNEL_DECLS(T)                                                                          \
  /* C[M,N] += A[M,K] * B[K,N]; row-major with leading dimensions. */                                  \
  void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,      \
            std::size_t ldb, T* c, std::size_t ldc) noexcept;                                           \
  /* y += alpha * x */                                                                                  \
  void axpy(std::size_t n, T alpha, const T* x, T* y) noexcept;                                         \
  /* y = alpha * x + beta */                                                                            \
  void affine(std::size_t n, T alpha, T beta, const T* x, T* y) noexcept;                               \
  T dot(std::size_t n, const T* x, const T* y) noexcept;                                                \
  T sum(std::size_t n, const T* x) noexcept;                                                            \
  /* sum of (x - mean)^2 */                                                                             \
  T sum_sq_dev(std::size_t n, const T* x, T mean) noexcept;                                             \
  void relu_forward(std::size_t n, const T* x, T* y) noexcept;                                          \
  /* dx += dy where x > 0 */                                                                            \
  void relu_backward(std::size_t n, const T* x, const T* dy, T* dx) noexcept;                           \
  /* z = x * y elementwise */                                                                           \
  void mul(std::size_t n, const T* x, const T* y, T* z) noexcept;

MUDEEP_KERNEL_DECLS(float)
MUDEEP_KERNEL_DECLS(double)

namespace scalar {
MUDEEP_KERNEL_DECLS(float)
MUDEEP_KERNEL_DECLS(double)
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
#define MUDEEP_HAVE_AVX2_KERNELS 1
namespace avx2 {
MUDEEP_KERNEL_DECLS(float)
MUDEEP_KERNEL_DECLS(double)
}  // namespace avx2
#endif

#undef MUDEEP_KERNEL_DECLS

}  // namespace mudeep::kernels
