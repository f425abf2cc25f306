#include "mudeep/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mudeep/kernels/kernels.hpp"
#include "mudeep/parallel.hpp"

namespace mudeep {
namespace {

template <class T>
Var<T> make_output(Tensor<T> value, std::initializer_list<const Var<T>*> inputs) {
  auto out = std::make_shared<Node<T>>();
  out->value = std::move(value);
  for (auto* in : inputs)
    if ((*in)->requires_grad) out->requires_grad = true;
  return out;
}

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
}

template <class T>
void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  constexpr std::size_t B = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += B)
    for (std::size_t j0 = 0; j0 < cols; j0 += B) {
      const std::size_t i1 = std::min(rows, i0 + B), j1 = std::min(cols, j0 + B);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
    }
}

struct ConvDims {
  std::size_t n, c, h, w, k, kh, kw, ho, wo;
  ConvGeometry geo;
  std::size_t ckk() const { return c * kh * kw; }
  std::size_t plane_out() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && geo.stride == 1 && geo.pad_h == 0 && geo.pad_w == 0; }
};

// Output columns [lo, hi) whose input column ow*stride + j - pad lies inside
// [0, in); the rest read padding.
void valid_span(std::size_t out, std::size_t stride, std::size_t j, std::size_t pad, std::size_t in,
                std::size_t& lo, std::size_t& hi) {
  hi = in + pad > j ? std::min(out, (in - 1 + pad - j) / stride + 1) : 0;
  lo = std::min(hi, pad > j ? (pad - j + stride - 1) / stride : std::size_t{0});
}

template <class T>
void im2col(const ConvDims& d, const T* x, T* col) {
  const std::size_t hw_out = d.plane_out();
  const std::size_t s = d.geo.stride;
  for (std::size_t c = 0; c < d.c; ++c)
    for (std::size_t i = 0; i < d.kh; ++i)
      for (std::size_t j = 0; j < d.kw; ++j) {
        T* row = col + ((c * d.kh + i) * d.kw + j) * hw_out;
        const T* plane = x + c * d.h * d.w;
        std::size_t lo, hi;
        valid_span(d.wo, s, j, d.geo.pad_w, d.w, lo, hi);
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const long ih = static_cast<long>(oh * s + i) - static_cast<long>(d.geo.pad_h);
          T* dst = row + oh * d.wo;
          if (ih < 0 || ih >= static_cast<long>(d.h)) {
            std::fill(dst, dst + d.wo, T(0));
            continue;
          }
          std::fill(dst, dst + lo, T(0));
          std::fill(dst + hi, dst + d.wo, T(0));
          if (lo == hi) continue;
          // Column lo + t reads input column lo*s + j - pad + t*s.
          const T* src = plane + ih * d.w + (lo * s + j - d.geo.pad_w);
          if (s == 1)
            std::copy(src, src + (hi - lo), dst + lo);
          else
            for (std::size_t t = 0; t < hi - lo; ++t) dst[lo + t] = src[t * s];
        }
      }
}

template <class T>
void col2im_add(const ConvDims& d, const T* col, T* dx) {
  const std::size_t hw_out = d.plane_out();
  const std::size_t s = d.geo.stride;
  for (std::size_t c = 0; c < d.c; ++c)
    for (std::size_t i = 0; i < d.kh; ++i)
      for (std::size_t j = 0; j < d.kw; ++j) {
        const T* row = col + ((c * d.kh + i) * d.kw + j) * hw_out;
        T* plane = dx + c * d.h * d.w;
        std::size_t lo, hi;
        valid_span(d.wo, s, j, d.geo.pad_w, d.w, lo, hi);
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const long ih = static_cast<long>(oh * s + i) - static_cast<long>(d.geo.pad_h);
          if (ih < 0 || ih >= static_cast<long>(d.h)) continue;
          if (lo == hi) continue;
          const T* src = row + oh * d.wo + lo;
          T* dst = plane + ih * d.w + (lo * s + j - d.geo.pad_w);
          for (std::size_t t = 0; t < hi - lo; ++t) dst[t * s] += src[t];
        }
      }
}

}  // namespace

std::size_t window_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (k == 0) throw GeometryError("window size must be at least 1");
  if (stride == 0) throw GeometryError("stride must be at least 1");
  if (in + 2 * pad < k)
    throw GeometryError("window " + std::to_string(k) + " does not fit input extent " + std::to_string(in) +
                        " with padding " + std::to_string(pad));
  return (in + 2 * pad - k) / stride + 1;
}

template <class T>
Var<T> conv2d(Graph<T>& g, const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvGeometry geo) {
  const Shape& xs = x->value.shape();
  const Shape& ws = weight->value.shape();
  require_rank(xs, 4, "conv2d", "input");
  require_rank(ws, 4, "conv2d", "weight");
  if (ws[1] != xs[1])
    throw ShapeError("conv2d: weight depth " + std::to_string(ws[1]) + " does not match input channels " +
                     std::to_string(xs[1]) + " (input " + shape_str(xs) + ", weight " + shape_str(ws) + ")");
  if (bias->value.shape() != Shape{ws[0]})
    throw ShapeError("conv2d: bias shape " + shape_str(bias->value.shape()) + " does not match " +
                     std::to_string(ws[0]) + " filters");
  ConvDims d{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], 0, 0, geo};
  d.ho = window_out_size(d.h, d.kh, geo.stride, geo.pad_h);
  d.wo = window_out_size(d.w, d.kw, geo.stride, geo.pad_w);

  Tensor<T> out({d.n, d.k, d.ho, d.wo});
  const std::size_t hw_out = d.plane_out();
  const std::size_t in_plane = d.c * d.h * d.w;
  const std::size_t out_plane = d.k * hw_out;
  const T* wp = weight->value.ptr();
  const T* bp = bias->value.ptr();
  const T* xp = x->value.ptr();
  T* op = out.ptr();

  parallel_for(d.n, [&](std::size_t begin, std::size_t end, std::size_t) {
    std::vector<T> col(d.pointwise() ? 0 : d.ckk() * hw_out);
    for (std::size_t n = begin; n < end; ++n) {
      T* on = op + n * out_plane;
      for (std::size_t k = 0; k < d.k; ++k) std::fill(on + k * hw_out, on + (k + 1) * hw_out, bp[k]);
      const T* src = xp + n * in_plane;
      if (!d.pointwise()) {
        im2col(d, src, col.data());
        src = col.data();
      }
      kernels::gemm(d.k, hw_out, d.ckk(), wp, d.ckk(), src, hw_out, on, hw_out);
    }
  });

  auto y = make_output(std::move(out), {&x, &weight, &bias});
  if (y->requires_grad) {
    g.tape.record(y, [x, weight, bias, y, d, in_plane, out_plane, hw_out] {
      const T* dy = y->grad.ptr();
      const T* xp = x->value.ptr();
      const bool need_dx = x->requires_grad;
      const bool need_dw = weight->requires_grad;
      const bool need_db = bias->requires_grad;
      const std::size_t ckk = d.ckk();

      std::vector<T> wt;
      T* dxp = nullptr;
      if (need_dx) {
        wt.resize(ckk * d.k);
        transpose(weight->value.ptr(), d.k, ckk, wt.data());
        dxp = x->grad_buffer().ptr();
      }
      // Weight and bias contributions are kept per sample and folded in sample
      // order, so the result does not depend on how samples were split across
      // workers, and the accumulator receives exactly one addition.
      const std::size_t wsize = ckk * d.k;
      std::vector<T> dw_all(need_dw ? d.n * wsize : 0, T(0));
      std::vector<T> db_all(need_db ? d.n * d.k : 0);

      parallel_for(d.n, [&](std::size_t begin, std::size_t end, std::size_t) {
        std::vector<T> col(d.pointwise() ? 0 : ckk * hw_out);
        std::vector<T> colt(need_dw ? hw_out * ckk : 0);
        for (std::size_t n = begin; n < end; ++n) {
          const T* dyn = dy + n * out_plane;
          if (need_db)
            for (std::size_t k = 0; k < d.k; ++k) db_all[n * d.k + k] = kernels::sum(hw_out, dyn + k * hw_out);
          if (need_dw) {
            const T* src = xp + n * in_plane;
            if (!d.pointwise()) {
              im2col(d, src, col.data());
              src = col.data();
            }
            // dW = dy * col^T with the wide ckk axis vectorised; the filter
            // count is often smaller than one register.
            transpose(src, ckk, hw_out, colt.data());
            kernels::gemm(d.k, ckk, hw_out, dyn, hw_out, colt.data(), ckk, dw_all.data() + n * wsize, ckk);
          }
          if (need_dx) {
            T* dxn = dxp + n * in_plane;
            if (d.pointwise()) {
              kernels::gemm(ckk, hw_out, d.k, wt.data(), d.k, dyn, hw_out, dxn, hw_out);
            } else {
              std::fill(col.begin(), col.end(), T(0));
              kernels::gemm(ckk, hw_out, d.k, wt.data(), d.k, dyn, hw_out, col.data(), hw_out);
              col2im_add(d, col.data(), dxn);
            }
          }
        }
      });

      if (need_dw) {
        std::vector<T> total(dw_all.begin(), dw_all.begin() + wsize);
        for (std::size_t n = 1; n < d.n; ++n) kernels::axpy(wsize, T(1), dw_all.data() + n * wsize, total.data());
        kernels::axpy(wsize, T(1), total.data(), weight->grad_buffer().ptr());
      }
      if (need_db) {
        std::vector<T> total(db_all.begin(), db_all.begin() + d.k);
        for (std::size_t n = 1; n < d.n; ++n) kernels::axpy(d.k, T(1), db_all.data() + n * d.k, total.data());
        kernels::axpy(d.k, T(1), total.data(), bias->grad_buffer().ptr());
      }
    });
  }
  return y;
}

namespace {

struct PoolDims {
  std::size_t planes, h, w, ho, wo, k, stride, pad;
};

PoolDims pool_dims(const Shape& xs, std::size_t k, std::size_t stride, std::size_t pad, const char* op) {
  require_rank(xs, 4, op, "input");
  if (pad >= k) throw GeometryError(std::string(op) + ": padding must be smaller than the window");
  PoolDims d{xs[0] * xs[1], xs[2], xs[3], 0, 0, k, stride, pad};
  d.ho = window_out_size(d.h, k, stride, pad);
  d.wo = window_out_size(d.w, k, stride, pad);
  return d;
}

}  // namespace

template <class T>
Var<T> max_pool2d(Graph<T>& g, const Var<T>& x, std::size_t k, std::size_t stride, std::size_t pad) {
  const Shape& xs = x->value.shape();
  const PoolDims d = pool_dims(xs, k, stride, pad, "max_pool2d");
  Tensor<T> out({xs[0], xs[1], d.ho, d.wo});
  std::vector<std::size_t> argmax(out.numel());
  const T* xp = x->value.ptr();
  T* op = out.ptr();
  for (std::size_t p = 0; p < d.planes; ++p) {
    const T* plane = xp + p * d.h * d.w;
    for (std::size_t oh = 0; oh < d.ho; ++oh)
      for (std::size_t ow = 0; ow < d.wo; ++ow) {
        const long h0 = static_cast<long>(oh * stride) - static_cast<long>(pad);
        const long w0 = static_cast<long>(ow * stride) - static_cast<long>(pad);
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = d.h * d.w;
        for (long ih = std::max(h0, 0L); ih < std::min(h0 + static_cast<long>(k), static_cast<long>(d.h)); ++ih)
          for (long iw = std::max(w0, 0L); iw < std::min(w0 + static_cast<long>(k), static_cast<long>(d.w)); ++iw) {
            const std::size_t idx = ih * d.w + iw;
            if (best_idx == d.h * d.w || plane[idx] > best) {
              best = plane[idx];
              best_idx = idx;
            }
          }
        const std::size_t o = (p * d.ho + oh) * d.wo + ow;
        op[o] = best;
        argmax[o] = p * d.h * d.w + best_idx;
      }
  }
  if (g.track_kinks) g.kinks.update(argmax.data(), argmax.size() * sizeof(std::size_t));
  auto y = make_output(std::move(out), {&x});
  if (y->requires_grad) {
    g.tape.record(y, [x, y, argmax = std::move(argmax)] {
      T* dx = x->grad_buffer().ptr();
      const T* dy = y->grad.ptr();
      for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += dy[o];
    });
  }
  return y;
}

template <class T>
Var<T> avg_pool2d(Graph<T>& g, const Var<T>& x, std::size_t k, std::size_t stride, std::size_t pad) {
  const Shape& xs = x->value.shape();
  const PoolDims d = pool_dims(xs, k, stride, pad, "avg_pool2d");
  Tensor<T> out({xs[0], xs[1], d.ho, d.wo});
  const T inv = T(1) / static_cast<T>(k * k);
  const T* xp = x->value.ptr();
  T* op = out.ptr();
  auto window = [d](std::size_t oh, std::size_t ow, long& h0, long& h1, long& w0, long& w1) {
    const long hs = static_cast<long>(oh * d.stride) - static_cast<long>(d.pad);
    const long ws = static_cast<long>(ow * d.stride) - static_cast<long>(d.pad);
    h0 = std::max(hs, 0L);
    h1 = std::min(hs + static_cast<long>(d.k), static_cast<long>(d.h));
    w0 = std::max(ws, 0L);
    w1 = std::min(ws + static_cast<long>(d.k), static_cast<long>(d.w));
  };
  for (std::size_t p = 0; p < d.planes; ++p) {
    const T* plane = xp + p * d.h * d.w;
    for (std::size_t oh = 0; oh < d.ho; ++oh)
      for (std::size_t ow = 0; ow < d.wo; ++ow) {
        long h0, h1, w0, w1;
        window(oh, ow, h0, h1, w0, w1);
        T s = 0;
        for (long ih = h0; ih < h1; ++ih)
          for (long iw = w0; iw < w1; ++iw) s += plane[ih * d.w + iw];
        op[(p * d.ho + oh) * d.wo + ow] = s * inv;
      }
  }
  auto y = make_output(std::move(out), {&x});
  if (y->requires_grad) {
    g.tape.record(y, [x, y, d, inv, window] {
      T* dx = x->grad_buffer().ptr();
      const T* dy = y->grad.ptr();
      for (std::size_t p = 0; p < d.planes; ++p)
        for (std::size_t oh = 0; oh < d.ho; ++oh)
          for (std::size_t ow = 0; ow < d.wo; ++ow) {
            long h0, h1, w0, w1;
            window(oh, ow, h0, h1, w0, w1);
            const T gv = dy[(p * d.ho + oh) * d.wo + ow] * inv;
            T* plane = dx + p * d.h * d.w;
            for (long ih = h0; ih < h1; ++ih)
              for (long iw = w0; iw < w1; ++iw) plane[ih * d.w + iw] += gv;
          }
    });
  }
  return y;
}

template <class T>
Var<T> batch_norm(Graph<T>& g, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var) {
  const Shape& xs = x->value.shape();
  if (xs.size() != 2 && xs.size() != 4)
    throw ShapeError("batch_norm: input must be [N,C,H,W] or [N,F], got " + shape_str(xs));
  const std::size_t n = xs[0], c = xs[1];
  const std::size_t hw = xs.size() == 4 ? xs[2] * xs[3] : 1;
  const Shape cs{c};
  if (gamma->value.shape() != cs || beta->value.shape() != cs || running_mean.shape() != cs ||
      running_var.shape() != cs)
    throw ShapeError("batch_norm: per-channel tensors must have shape " + shape_str(cs));
  const bool train = g.training();
  if (train && n < 2) throw ShapeError("batch_norm: train mode needs a batch of at least 2, got 1");

  const std::size_t m = n * hw;
  const T eps = static_cast<T>(kBatchNormEps);
  const T* xp = x->value.ptr();
  Tensor<T> xhat(xs);
  Tensor<T> out(xs);
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mean, var;
    if (train) {
      T s = 0;
      for (std::size_t i = 0; i < n; ++i) s += kernels::sum(hw, xp + (i * c + ch) * hw);
      mean = s / static_cast<T>(m);
      T ss = 0;
      for (std::size_t i = 0; i < n; ++i) ss += kernels::sum_sq_dev(hw, xp + (i * c + ch) * hw, mean);
      var = ss / static_cast<T>(m);
      if (g.update_running_stats) {
        const T mom = static_cast<T>(kBatchNormMomentum);
        running_mean[ch] = mom * running_mean[ch] + (T(1) - mom) * mean;
        running_var[ch] = mom * running_var[ch] + (T(1) - mom) * (ss / static_cast<T>(m - 1));
      }
    } else {
      mean = running_mean[ch];
      var = running_var[ch];
    }
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[ch] = is;
    const T gm = gamma->value[ch], bt = beta->value[ch];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * hw;
      kernels::affine(hw, is, -mean * is, xp + off, xhat.ptr() + off);
      kernels::affine(hw, gm, bt, xhat.ptr() + off, out.ptr() + off);
    }
  }

  auto y = make_output(std::move(out), {&x, &gamma, &beta});
  if (y->requires_grad) {
    g.tape.record(y, [x, gamma, beta, y, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw, m,
                      train] {
      const T* dy = y->grad.ptr();
      const T* xh = xhat.ptr();
      T* dx = x->requires_grad ? x->grad_buffer().ptr() : nullptr;
      for (std::size_t ch = 0; ch < c; ++ch) {
        T sum_dy = 0, sum_dy_xhat = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t off = (i * c + ch) * hw;
          sum_dy += kernels::sum(hw, dy + off);
          sum_dy_xhat += kernels::dot(hw, dy + off, xh + off);
        }
        if (gamma->requires_grad) gamma->grad_buffer()[ch] += sum_dy_xhat;
        if (beta->requires_grad) beta->grad_buffer()[ch] += sum_dy;
        if (!dx) continue;
        const T k1 = gamma->value[ch] * inv_std[ch];
        if (train) {
          const T mm = static_cast<T>(m);
          const T k2 = -k1 * sum_dy_xhat / mm;
          const T k3 = -k1 * sum_dy / mm;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) dx[off + j] += k1 * dy[off + j] + k2 * xh[off + j] + k3;
          }
        } else {
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * hw;
            kernels::axpy(hw, k1, dy + off, dx + off);
          }
        }
      }
    });
  }
  return y;
}

template <class T>
Var<T> relu(Graph<T>& g, const Var<T>& x) {
  Tensor<T> out(x->value.shape());
  kernels::relu_forward(out.numel(), x->value.ptr(), out.ptr());
  if (g.track_kinks) {
    std::vector<unsigned char> mask(out.numel());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = x->value[i] > T(0);
    g.kinks.update(mask.data(), mask.size());
  }
  auto y = make_output(std::move(out), {&x});
  if (y->requires_grad) {
    g.tape.record(y, [x, y] {
      kernels::relu_backward(x->value.numel(), x->value.ptr(), y->grad.ptr(), x->grad_buffer().ptr());
    });
  }
  return y;
}

template <class T>
Var<T> dropout(Graph<T>& g, const Var<T>& x, double p) {
  if (!(p >= 0.0 && p < 1.0)) throw InvalidArgument("dropout: probability must lie in [0,1), got " + std::to_string(p));
  if (!g.training() || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::bernoulli_distribution keep(1.0 - p);
  Tensor<T> mask(x->value.shape());
  for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = keep(g.rng) ? keep_scale : T(0);
  Tensor<T> out(x->value.shape());
  kernels::mul(out.numel(), x->value.ptr(), mask.ptr(), out.ptr());
  auto y = make_output(std::move(out), {&x});
  if (y->requires_grad) {
    g.tape.record(y, [x, y, mask = std::move(mask)] {
      T* dx = x->grad_buffer().ptr();
      const T* dy = y->grad.ptr();
      for (std::size_t i = 0; i < mask.numel(); ++i) dx[i] += dy[i] * mask[i];
    });
  }
  return y;
}

template <class T>
Var<T> fully_connected(Graph<T>& g, const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape& xs = x->value.shape();
  const Shape& ws = weight->value.shape();
  require_rank(xs, 2, "fully_connected", "input");
  require_rank(ws, 2, "fully_connected", "weight");
  if (ws[1] != xs[1])
    throw ShapeError("fully_connected: weight " + shape_str(ws) + " does not accept input " + shape_str(xs));
  if (bias->value.shape() != Shape{ws[0]})
    throw ShapeError("fully_connected: bias shape " + shape_str(bias->value.shape()) + " does not match weight " +
                     shape_str(ws));
  const std::size_t n = xs[0], in = xs[1], outd = ws[0];
  Tensor<T> out({n, outd});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(bias->value.ptr(), outd, out.ptr() + i * outd);
  {
    std::vector<T> wt(in * outd);
    transpose(weight->value.ptr(), outd, in, wt.data());
    kernels::gemm(n, outd, in, x->value.ptr(), in, wt.data(), outd, out.ptr(), outd);
  }
  auto y = make_output(std::move(out), {&x, &weight, &bias});
  if (y->requires_grad) {
    g.tape.record(y, [x, weight, bias, y, n, in, outd] {
      const T* dy = y->grad.ptr();
      // Each contribution is formed in scratch and added once (see conv2d).
      if (bias->requires_grad) {
        std::vector<T> db(dy, dy + outd);
        for (std::size_t i = 1; i < n; ++i) kernels::axpy(outd, T(1), dy + i * outd, db.data());
        kernels::axpy(outd, T(1), db.data(), bias->grad_buffer().ptr());
      }
      if (weight->requires_grad) {
        std::vector<T> dyt(outd * n), dw(outd * in, T(0));
        transpose(dy, n, outd, dyt.data());
        kernels::gemm(outd, in, n, dyt.data(), n, x->value.ptr(), in, dw.data(), in);
        kernels::axpy(dw.size(), T(1), dw.data(), weight->grad_buffer().ptr());
      }
      if (x->requires_grad) {
        std::vector<T> dx(n * in, T(0));
        kernels::gemm(n, in, outd, dy, outd, weight->value.ptr(), in, dx.data(), in);
        kernels::axpy(dx.size(), T(1), dx.data(), x->grad_buffer().ptr());
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  require_rank(logits.shape(), 2, "softmax", "logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits.ptr() + i * c;
    T* pi = p.ptr() + i * c;
    const T mx = *std::max_element(z, z + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += (pi[j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < c; ++j) pi[j] /= s;
  }
  return p;
}

template <class T>
Var<T> softmax_cross_entropy(Graph<T>& g, const Var<T>& logits, std::span<const int> labels) {
  const Shape& ls = logits->value.shape();
  require_rank(ls, 2, "softmax_cross_entropy", "logits");
  const std::size_t n = ls[0], c = ls[1];
  if (labels.size() != n)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(n));
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= c)
      throw InvalidArgument("softmax_cross_entropy: label " + std::to_string(l) + " out of range for " +
                            std::to_string(c) + " classes");
  Tensor<T> probs = softmax_rows(logits->value);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits->value.ptr() + i * c;
    const T mx = *std::max_element(z, z + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - mx);
    total += mx + std::log(s) - z[labels[i]];
  }
  Tensor<T> loss({1}, total / static_cast<T>(n));
  auto y = make_output(std::move(loss), {&logits});
  if (y->requires_grad) {
    std::vector<int> lab(labels.begin(), labels.end());
    g.tape.record(y, [logits, y, probs = std::move(probs), lab = std::move(lab), n, c] {
      const T scale = y->grad[0] / static_cast<T>(n);
      T* dz = logits->grad_buffer().ptr();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const T target = static_cast<std::size_t>(lab[i]) == j ? T(1) : T(0);
          dz[i * c + j] += (probs[i * c + j] - target) * scale;
        }
    });
  }
  return y;
}

namespace {
template <class T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a->value.shape() != b->value.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->value.shape()) + " vs " +
                     shape_str(b->value.shape()));
}
}  // namespace

template <class T>
Var<T> add(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "add");
  Tensor<T> out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
  auto y = make_output(std::move(out), {&a, &b});
  if (y->requires_grad) {
    g.tape.record(y, [a, b, y] {
      const std::size_t n = y->value.numel();
      if (a->requires_grad) kernels::axpy(n, T(1), y->grad.ptr(), a->grad_buffer().ptr());
      if (b->requires_grad) kernels::axpy(n, T(1), y->grad.ptr(), b->grad_buffer().ptr());
    });
  }
  return y;
}

template <class T>
Var<T> sub(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "sub");
  Tensor<T> out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
  auto y = make_output(std::move(out), {&a, &b});
  if (y->requires_grad) {
    g.tape.record(y, [a, b, y] {
      const std::size_t n = y->value.numel();
      if (a->requires_grad) kernels::axpy(n, T(1), y->grad.ptr(), a->grad_buffer().ptr());
      if (b->requires_grad) kernels::axpy(n, T(-1), y->grad.ptr(), b->grad_buffer().ptr());
    });
  }
  return y;
}

template <class T>
Var<T> mul(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "mul");
  Tensor<T> out(a->value.shape());
  kernels::mul(out.numel(), a->value.ptr(), b->value.ptr(), out.ptr());
  auto y = make_output(std::move(out), {&a, &b});
  if (y->requires_grad) {
    g.tape.record(y, [a, b, y] {
      const std::size_t n = y->value.numel();
      const T* dy = y->grad.ptr();
      if (a->requires_grad) {
        T* da = a->grad_buffer().ptr();
        for (std::size_t i = 0; i < n; ++i) da[i] += dy[i] * b->value[i];
      }
      if (b->requires_grad) {
        T* db = b->grad_buffer().ptr();
        for (std::size_t i = 0; i < n; ++i) db[i] += dy[i] * a->value[i];
      }
    });
  }
  return y;
}

template <class T>
Var<T> scale(Graph<T>& g, const Var<T>& x, T factor) {
  Tensor<T> out(x->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = factor * x->value[i];
  auto y = make_output(std::move(out), {&x});
  if (y->requires_grad) {
    g.tape.record(y, [x, y, factor] {
      T* dx = x->grad_buffer().ptr();
      for (std::size_t i = 0; i < y->value.numel(); ++i) dx[i] += factor * y->grad[i];
    });
  }
  return y;
}

template <class T>
Var<T> sum_all(Graph<T>& g, const Var<T>& x) {
  Tensor<T> out({1}, kernels::sum(x->value.numel(), x->value.ptr()));
  auto y = make_output(std::move(out), {&x});
  if (y->requires_grad) {
    g.tape.record(y, [x, y] {
      T* dx = x->grad_buffer().ptr();
      const T gv = y->grad[0];
      for (std::size_t i = 0; i < x->value.numel(); ++i) dx[i] += gv;
    });
  }
  return y;
}

template <class T>
Var<T> channel_concat(Graph<T>& g, std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("channel_concat: no inputs");
  const Shape& s0 = parts[0]->value.shape();
  require_rank(s0, 4, "channel_concat", "input");
  std::size_t channels = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    const Shape& s = p->value.shape();
    require_rank(s, 4, "channel_concat", "input");
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw ShapeError("channel_concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    channels += s[1];
    any_grad = any_grad || p->requires_grad;
  }
  const std::size_t n = s0[0], hw = s0[2] * s0[3];
  Tensor<T> out({n, channels, s0[2], s0[3]});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p->value.dim(1);
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(p->value.ptr() + i * c * hw, c * hw, out.ptr() + (i * channels + offset) * hw);
    offset += c;
  }
  auto y = std::make_shared<Node<T>>();
  y->value = std::move(out);
  y->requires_grad = any_grad;
  if (any_grad) {
    std::vector<Var<T>> inputs(parts.begin(), parts.end());
    g.tape.record(y, [inputs = std::move(inputs), y, n, hw, channels] {
      std::size_t offset = 0;
      for (const auto& p : inputs) {
        const std::size_t c = p->value.dim(1);
        if (p->requires_grad) {
          T* dp = p->grad_buffer().ptr();
          for (std::size_t i = 0; i < n; ++i)
            kernels::axpy(c * hw, T(1), y->grad.ptr() + (i * channels + offset) * hw, dp + i * c * hw);
        }
        offset += c;
      }
    });
  }
  return y;
}

template <class T>
Var<T> channel_scale(Graph<T>& g, const Var<T>& f, const Var<T>& alpha) {
  const Shape& fs = f->value.shape();
  require_rank(fs, 4, "channel_scale", "input");
  if (alpha->value.shape() != Shape{fs[1]})
    throw ShapeError("channel_scale: alpha " + shape_str(alpha->value.shape()) + " does not match " +
                     std::to_string(fs[1]) + " channels");
  const std::size_t n = fs[0], c = fs[1], hw = fs[2] * fs[3];
  Tensor<T> out(fs);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * hw;
      const T a = alpha->value[ch];
      for (std::size_t j = 0; j < hw; ++j) out[off + j] = a * f->value[off + j];
    }
  auto y = make_output(std::move(out), {&f, &alpha});
  if (y->requires_grad) {
    g.tape.record(y, [f, alpha, y, n, c, hw] {
      const T* dy = y->grad.ptr();
      std::vector<T> da(c, T(0));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t off = (i * c + ch) * hw;
          if (f->requires_grad) kernels::axpy(hw, alpha->value[ch], dy + off, f->grad_buffer().ptr() + off);
          if (alpha->requires_grad) da[ch] += kernels::dot(hw, dy + off, f->value.ptr() + off);
        }
      if (alpha->requires_grad) kernels::axpy(c, T(1), da.data(), alpha->grad_buffer().ptr());
    });
  }
  return y;
}

template <class T>
Var<T> select_row(Graph<T>& g, const Var<T>& m, std::size_t r) {
  const Shape& ms = m->value.shape();
  require_rank(ms, 2, "select_row", "input");
  if (r >= ms[0]) throw ShapeError("select_row: row " + std::to_string(r) + " out of range for " + shape_str(ms));
  const std::size_t cols = ms[1];
  Tensor<T> out({cols});
  std::copy_n(m->value.ptr() + r * cols, cols, out.ptr());
  auto y = make_output(std::move(out), {&m});
  if (y->requires_grad) {
    g.tape.record(y, [m, y, r, cols] {
      kernels::axpy(cols, T(1), y->grad.ptr(), m->grad_buffer().ptr() + r * cols);
    });
  }
  return y;
}

template <class T>
Var<T> flatten(Graph<T>& g, const Var<T>& x) {
  const Shape& xs = x->value.shape();
  if (xs.size() < 2) throw ShapeError("flatten: input must have a batch dimension, got " + shape_str(xs));
  auto y = make_output(x->value.reshaped({xs[0], x->value.numel() / xs[0]}), {&x});
  if (y->requires_grad) {
    g.tape.record(y, [x, y] {
      kernels::axpy(y->value.numel(), T(1), y->grad.ptr(), x->grad_buffer().ptr());
    });
  }
  return y;
}

#define MUDEEP_INSTANTIATE_OPS(T)                                                                            \
  template Var<T> conv2d(Graph<T>&, const Var<T>&, const Var<T>&, const Var<T>&, ConvGeometry);              \
  template Var<T> max_pool2d(Graph<T>&, const Var<T>&, std::size_t, std::size_t, std::size_t);               \
  template Var<T> avg_pool2d(Graph<T>&, const Var<T>&, std::size_t, std::size_t, std::size_t);               \
  template Var<T> batch_norm(Graph<T>&, const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&); \
  template Var<T> relu(Graph<T>&, const Var<T>&);                                                            \
  template Var<T> dropout(Graph<T>&, const Var<T>&, double);                                                 \
  template Var<T> fully_connected(Graph<T>&, const Var<T>&, const Var<T>&, const Var<T>&);                   \
  template Var<T> softmax_cross_entropy(Graph<T>&, const Var<T>&, std::span<const int>);                     \
  template Var<T> add(Graph<T>&, const Var<T>&, const Var<T>&);                                              \
  template Var<T> sub(Graph<T>&, const Var<T>&, const Var<T>&);                                              \
  template Var<T> mul(Graph<T>&, const Var<T>&, const Var<T>&);                                              \
  template Var<T> scale(Graph<T>&, const Var<T>&, T);                                                        \
  template Var<T> sum_all(Graph<T>&, const Var<T>&);                                                         \
  template Var<T> channel_concat(Graph<T>&, std::span<const Var<T>>);                                        \
  template Var<T> channel_scale(Graph<T>&, const Var<T>&, const Var<T>&);                                    \
  template Var<T> select_row(Graph<T>&, const Var<T>&, std::size_t);                                         \
  template Var<T> flatten(Graph<T>&, const Var<T>&);                                                         \
  template Tensor<T> softmax_rows(const Tensor<T>&);

MUDEEP_INSTANTIATE_OPS(float)
MUDEEP_INSTANTIATE_OPS(double)

}  // namespace mudeep
