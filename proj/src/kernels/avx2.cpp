// Compiled with -mavx2 -mfma; only reached through the dispatcher after a
// runtime CPU check.
#include <immintrin.h>

#include <algorithm>

#include "mudeep/kernels/kernels.hpp"

namespace mudeep::kernels::avx2 {
namespace {

template <class T>
struct V;

template <>
struct V<float> {
  using reg = __m256;
  using mask = __m256i;
  static constexpr std::size_t width = 8;
  static reg zero() { return _mm256_setzero_ps(); }
  static reg set1(float v) { return _mm256_set1_ps(v); }
  static reg load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
  static reg mload(const float* p, mask m) { return _mm256_maskload_ps(p, m); }
  static void mstore(float* p, mask m, reg v) { _mm256_maskstore_ps(p, m, v); }
  static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_ps(a, b, c); }
  static reg add(reg a, reg b) { return _mm256_add_ps(a, b); }
  static reg sub(reg a, reg b) { return _mm256_sub_ps(a, b); }
  static reg mul(reg a, reg b) { return _mm256_mul_ps(a, b); }
  static reg max(reg a, reg b) { return _mm256_max_ps(a, b); }
  static reg gt_and(reg x, reg y) {  // y where x > 0 else 0
    return _mm256_and_ps(_mm256_cmp_ps(x, zero(), _CMP_GT_OQ), y);
  }
  static reg keep(mask m, reg x) { return _mm256_and_ps(_mm256_castsi256_ps(m), x); }
  static mask tail(std::size_t r) {
    return _mm256_cmpgt_epi32(_mm256_set1_epi32(static_cast<int>(r)), _mm256_setr_epi32(0, 1, 2, 3, 4, 5, 6, 7));
  }
  static float hsum(reg v) {
    alignas(32) float lanes[8];
    _mm256_store_ps(lanes, v);
    float s = 0;
    for (float x : lanes) s += x;
    return s;
  }
};

template <>
struct V<double> {
  using reg = __m256d;
  using mask = __m256i;
  static constexpr std::size_t width = 4;
  static reg zero() { return _mm256_setzero_pd(); }
  static reg set1(double v) { return _mm256_set1_pd(v); }
  static reg load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
  static reg mload(const double* p, mask m) { return _mm256_maskload_pd(p, m); }
  static void mstore(double* p, mask m, reg v) { _mm256_maskstore_pd(p, m, v); }
  static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_pd(a, b, c); }
  static reg add(reg a, reg b) { return _mm256_add_pd(a, b); }
  static reg sub(reg a, reg b) { return _mm256_sub_pd(a, b); }
  static reg mul(reg a, reg b) { return _mm256_mul_pd(a, b); }
  static reg max(reg a, reg b) { return _mm256_max_pd(a, b); }
  static reg gt_and(reg x, reg y) { return _mm256_and_pd(_mm256_cmp_pd(x, zero(), _CMP_GT_OQ), y); }
  static reg keep(mask m, reg x) { return _mm256_and_pd(_mm256_castsi256_pd(m), x); }
  static mask tail(std::size_t r) {
    return _mm256_cmpgt_epi64(_mm256_set1_epi64x(static_cast<long long>(r)), _mm256_setr_epi64x(0, 1, 2, 3));
  }
  static double hsum(reg v) {
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, v);
    return ((lanes[0] + lanes[1]) + lanes[2]) + lanes[3];
  }
};

// One register tile: MR rows by NV vectors. When Masked, the last vector
// covers a partial column tail. Each C element sees the same fma chain over
// p regardless of the tile shape it falls in.
template <class T, int MR, int NV, bool Masked>
inline void micro_tile(std::size_t kc, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
                       std::size_t ldc, typename V<T>::mask m) {
  using v = V<T>;
  typename v::reg acc[MR][NV];
  for (int r = 0; r < MR; ++r)
    for (int q = 0; q < NV; ++q) {
      T* cp = c + r * ldc + q * v::width;
      acc[r][q] = (Masked && q == NV - 1) ? v::mload(cp, m) : v::load(cp);
    }
  for (std::size_t p = 0; p < kc; ++p) {
    const T* bp = b + p * ldb;
    typename v::reg bv[NV];
    for (int q = 0; q < NV; ++q)
      bv[q] = (Masked && q == NV - 1) ? v::mload(bp + q * v::width, m) : v::load(bp + q * v::width);
    for (int r = 0; r < MR; ++r) {
      const typename v::reg av = v::set1(a[r * lda + p]);
      for (int q = 0; q < NV; ++q) acc[r][q] = v::fmadd(av, bv[q], acc[r][q]);
    }
  }
  for (int r = 0; r < MR; ++r)
    for (int q = 0; q < NV; ++q) {
      T* cp = c + r * ldc + q * v::width;
      if (Masked && q == NV - 1)
        v::mstore(cp, m, acc[r][q]);
      else
        v::store(cp, acc[r][q]);
    }
}

template <class T, int NV, bool Masked>
inline void row_sweep(std::size_t m, std::size_t kc, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
                      std::size_t ldc, typename V<T>::mask mask) {
  constexpr int MR = 4;
  std::size_t i = 0;
  for (; i + MR <= m; i += MR) micro_tile<T, MR, NV, Masked>(kc, a + i * lda, lda, b, ldb, c + i * ldc, ldc, mask);
  for (; i < m; ++i) micro_tile<T, 1, NV, Masked>(kc, a + i * lda, lda, b, ldb, c + i * ldc, ldc, mask);
}

template <class T>
void gemm_impl(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
               std::size_t ldb, T* c, std::size_t ldc) noexcept {
  using v = V<T>;
  constexpr std::size_t W = v::width;
  constexpr std::size_t KC = 256;
  const auto full = v::tail(W);
  for (std::size_t k0 = 0; k0 < k; k0 += KC) {
    const std::size_t kc = std::min(KC, k - k0);
    const T* ak = a + k0;
    const T* bk = b + k0 * ldb;
    std::size_t j = 0;
    for (; j + 2 * W <= n; j += 2 * W) row_sweep<T, 2, false>(m, kc, ak, lda, bk + j, ldb, c + j, ldc, full);
    for (; j + W <= n; j += W) row_sweep<T, 1, false>(m, kc, ak, lda, bk + j, ldb, c + j, ldc, full);
    if (j < n) row_sweep<T, 1, true>(m, kc, ak, lda, bk + j, ldb, c + j, ldc, v::tail(n - j));
  }
}

template <class T>
void axpy_impl(std::size_t n, T alpha, const T* x, T* y) noexcept {
  using v = V<T>;
  const auto va = v::set1(alpha);
  std::size_t i = 0;
  for (; i + v::width <= n; i += v::width) v::store(y + i, v::fmadd(va, v::load(x + i), v::load(y + i)));
  if (i < n) {
    const auto m = v::tail(n - i);
    v::mstore(y + i, m, v::fmadd(va, v::mload(x + i, m), v::mload(y + i, m)));
  }
}

template <class T>
void affine_impl(std::size_t n, T alpha, T beta, const T* x, T* y) noexcept {
  using v = V<T>;
  const auto va = v::set1(alpha);
  const auto vb = v::set1(beta);
  std::size_t i = 0;
  for (; i + v::width <= n; i += v::width) v::store(y + i, v::fmadd(va, v::load(x + i), vb));
  if (i < n) {
    const auto m = v::tail(n - i);
    v::mstore(y + i, m, v::fmadd(va, v::mload(x + i, m), vb));
  }
}

template <class T>
T dot_impl(std::size_t n, const T* x, const T* y) noexcept {
  using v = V<T>;
  auto acc = v::zero();
  std::size_t i = 0;
  for (; i + v::width <= n; i += v::width) acc = v::fmadd(v::load(x + i), v::load(y + i), acc);
  if (i < n) {
    const auto m = v::tail(n - i);
    acc = v::fmadd(v::mload(x + i, m), v::mload(y + i, m), acc);
  }
  return v::hsum(acc);
}

template <class T>
T sum_impl(std::size_t n, const T* x) noexcept {
  using v = V<T>;
  auto acc = v::zero();
  std::size_t i = 0;
  for (; i + v::width <= n; i += v::width) acc = v::add(acc, v::load(x + i));
  if (i < n) acc = v::add(acc, v::mload(x + i, v::tail(n - i)));
  return v::hsum(acc);
}

template <class T>
T sum_sq_dev_impl(std::size_t n, const T* x, T mean) noexcept {
  using v = V<T>;
  const auto vm = v::set1(mean);
  auto acc = v::zero();
  std::size_t i = 0;
  for (; i + v::width <= n; i += v::width) {
    const auto d = v::sub(v::load(x + i), vm);
    acc = v::fmadd(d, d, acc);
  }
  if (i < n) {
    const auto m = v::tail(n - i);
    // masked-out lanes load 0, so clear them again after subtracting the mean
    const auto d = v::keep(m, v::sub(v::mload(x + i, m), vm));
    acc = v::fmadd(d, d, acc);
  }
  return v::hsum(acc);
}

// max(0, x) returns its second operand when unordered, so NaN propagates.
template <class T>
void relu_forward_impl(std::size_t n, const T* x, T* y) noexcept {
  using v = V<T>;
  const auto z = v::zero();
  std::size_t i = 0;
  for (; i + v::width <= n; i += v::width) v::store(y + i, v::max(z, v::load(x + i)));
  if (i < n) {
    const auto m = v::tail(n - i);
    v::mstore(y + i, m, v::max(z, v::mload(x + i, m)));
  }
}

template <class T>
void relu_backward_impl(std::size_t n, const T* x, const T* dy, T* dx) noexcept {
  using v = V<T>;
  std::size_t i = 0;
  for (; i + v::width <= n; i += v::width)
    v::store(dx + i, v::add(v::load(dx + i), v::gt_and(v::load(x + i), v::load(dy + i))));
  if (i < n) {
    const auto m = v::tail(n - i);
    v::mstore(dx + i, m, v::add(v::mload(dx + i, m), v::gt_and(v::mload(x + i, m), v::mload(dy + i, m))));
  }
}

template <class T>
void mul_impl(std::size_t n, const T* x, const T* y, T* z) noexcept {
  using v = V<T>;
  std::size_t i = 0;
  for (; i + v::width <= n; i += v::width) v::store(z + i, v::mul(v::load(x + i), v::load(y + i)));
  if (i < n) {
    const auto m = v::tail(n - i);
    v::mstore(z + i, m, v::mul(v::mload(x + i, m), v::mload(y + i, m)));
  }
}

}  // namespace

#define MUDEEP_AVX2_DEFS(T)                                                                         \
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

MUDEEP_AVX2_DEFS(float)
MUDEEP_AVX2_DEFS(double)

}  // namespace mudeep::kernels::avx2
