#pragma once

// Differentiable primitives. Every op computes its value eagerly and, when any
// input requires a gradient, records a backward closure on the graph's tape.
// Image tensors are NCHW row-major.

#include <span>
#include <vector>

#include "mudeep/autodiff.hpp"

namespace mudeep {

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
};

// floor((in + 2*pad - k) / stride) + 1; throws GeometryError when the window
// does not fit.
std::size_t window_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad);

template <class T>
Var<T> conv2d(Graph<T>& g, const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvGeometry geo);

// Ties go to the first maximum in row-major window order; padding never wins.
template <class T>
Var<T> max_pool2d(Graph<T>& g, const Var<T>& x, std::size_t k, std::size_t stride, std::size_t pad);

// Divides by k*k, counting padded cells as zeros.
template <class T>
Var<T> avg_pool2d(Graph<T>& g, const Var<T>& x, std::size_t k, std::size_t stride, std::size_t pad);

// Per-channel normalization over N*H*W (or N for [N,F] inputs). Train mode
// uses batch statistics and, if the graph allows, folds them into the running
// averages with momentum kBatchNormMomentum; eval mode uses the running ones.
template <class T>
Var<T> batch_norm(Graph<T>& g, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var);

template <class T>
Var<T> relu(Graph<T>& g, const Var<T>& x);

// Inverted dropout: survivors are scaled by 1/(1-p) in train mode; eval mode
// returns x itself.
template <class T>
Var<T> dropout(Graph<T>& g, const Var<T>& x, double p);

// x [N,in], weight [out,in], bias [out] -> [N,out]
template <class T>
Var<T> fully_connected(Graph<T>& g, const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// Mean negative log-likelihood of `labels` under softmax(logits); shape [1].
template <class T>
Var<T> softmax_cross_entropy(Graph<T>& g, const Var<T>& logits, std::span<const int> labels);

template <class T>
Var<T> add(Graph<T>& g, const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> sub(Graph<T>& g, const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> mul(Graph<T>& g, const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> scale(Graph<T>& g, const Var<T>& x, T factor);
template <class T>
Var<T> sum_all(Graph<T>& g, const Var<T>& x);

template <class T>
Var<T> channel_concat(Graph<T>& g, std::span<const Var<T>> parts);

// out[n,c,:,:] = alpha[c] * f[n,c,:,:]
template <class T>
Var<T> channel_scale(Graph<T>& g, const Var<T>& f, const Var<T>& alpha);

// Row r of a rank-2 tensor, as a rank-1 tensor.
template <class T>
Var<T> select_row(Graph<T>& g, const Var<T>& m, std::size_t r);

// [N, ...] -> [N, prod(...)]
template <class T>
Var<T> flatten(Graph<T>& g, const Var<T>& x);

// Row-wise softmax of a [N,C] tensor, outside any graph.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

}  // namespace mudeep
