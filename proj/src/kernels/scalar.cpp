#include "mudeep/kernels/kernels.hpp"

namespace mudeep::kernels::scalar {
namespace {

template <class T>
void gemm_impl(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
               std::size_t ldb, T* c, std::size_t ldc) noexcept {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    const T* arow = a + i * lda;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void axpy_impl(std::size_t n, T alpha, const T* x, T* y) noexcept {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void affine_impl(std::size_t n, T alpha, T beta, const T* x, T* y) noexcept {
  for (std::size_t i = 0; i < n; ++i) y[i] = alpha * x[i] + beta;
}

template <class T>
T dot_impl(std::size_t n, const T* x, const T* y) noexcept {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

template <class T>
T sum_impl(std::size_t n, const T* x) noexcept {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

template <class T>
T sum_sq_dev_impl(std::size_t n, const T* x, T mean) noexcept {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = x[i] - mean;
    s += d * d;
  }
  return s;
}

template <class T>
void relu_forward_impl(std::size_t n, const T* x, T* y) noexcept {
  for (std::size_t i = 0; i < n; ++i) y[i] = T(0) > x[i] ? T(0) : x[i];  // NaN propagates, as in the vector max
}

template <class T>
void relu_backward_impl(std::size_t n, const T* x, const T* dy, T* dx) noexcept {
  for (std::size_t i = 0; i < n; ++i)
    if (x[i] > T(0)) dx[i] += dy[i];
}

template <class T>
void mul_impl(std::size_t n, const T* x, const T* y, T* z) noexcept {
  for (std::size_t i = 0; i < n; ++i) z[i] = x[i] * y[i];
}

}  // namespace

#define MUDEEP_SCALAR_DEFS(T)                                                                       \
  void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,  \
            std::size_t ldb, T* c, std::size_t ldc) noexcept {                                      \
    gemm_impl(m, n, k, a, lda, b, ldb, c, ldc);                                                     \
  }                                                                                                 \
  void axpy(std::size_t n, T alpha, const T* x, T* y) noexcept { axpy_impl(n, alpha, x, y); }       \
  void affine(std::size_t n, T alpha, T beta, const T* x, T* y) noexcept {                          \
    affine_impl(n, alpha, beta, x, y);                                                              \
  }                                                                                                 \
  T dot(std::size_t n, const T* x, const T* y) noexcept { return dot_impl(n, x, y); }               \
  T sum(std::size_t n, const T* x) noexcept { return sum_impl(n, x); }                              \
  T sum_sq_dev(std::size_t n, const T* x, T mean) noexcept { return sum_sq_dev_impl(n, x, mean); } \
  void relu_forward(std::size_t n, const T* x, T* y) noexcept { relu_forward_impl(n, x, y); }       \
  void relu_backward(std::size_t n, const T* x, const T* dy, T* dx) noexcept {                      \
    relu_backward_impl(n, x, dy, dx);                                                               \
  }                                                                                                 \
  void mul(std::size_t n, const T* x, const T* y, T* z) noexcept { mul_impl(n, x, y, z); }

MUDEEP_SCALAR_DEFS(float)
MUDEEP_SCALAR_DEFS(double)

}  // namespace mudeep::kernels::scalar
