#pragma once

// Differentiable primitives. Operands are dense row-major; broadcasting is
// limited to the explicit cases named below (scalar, leading axes,
// per-channel, per-key).

#include <cstddef>
#include <vector>

#include "promptmatte/tensor.hpp"

namespace pmatte {

// Elementwise, identical shapes.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);

template <typename T>
Tensor<T> abs(const Tensor<T>& a);
template <typename T>
Tensor<T> silu(const Tensor<T>& a);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a);
// log(a + eps)
template <typename T>
Tensor<T> log_eps(const Tensor<T>& a, T eps);

// Scalar reductions, shape {1}.
template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
// out[..., i, ...] = a[..., i + 1, ...] - a[..., i, ...]
template <typename T>
Tensor<T> diff(const Tensor<T>& a, std::size_t axis);

// Affine map over the last axis: x[..., D_in] -> [..., D_out]. `bias` may be
// undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// Batched matmul: a [B, M, K] times b [B, K, N], or b [B, N, K] transposed.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

// scores [N*heads, Lq, Lk] + bias [N, Lk], the bias broadcast over heads and
// queries.
template <typename T>
Tensor<T> add_key_bias(const Tensor<T>& scores, const Tensor<T>& bias, std::size_t heads);

// Max-subtracted softmax over the last axis. A row with no finite entry is
// an ArgumentError.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& logits);

// Cross-correlation, zero padding. input NCHW, weight O x C x k x k, bias O
// (may be undefined).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding);

template <typename T>
Tensor<T> group_norm(const Tensor<T>& input, std::size_t groups, const Tensor<T>& scale,
                     const Tensor<T>& shift, T eps = T(1e-5));

// Group normalization followed by SiLU.
template <typename T>
Tensor<T> norm_act(const Tensor<T>& input, std::size_t groups, const Tensor<T>& scale,
                   const Tensor<T>& shift, T eps = T(1e-5));

// x NCHW plus v [N, C] broadcast over space.
template <typename T>
Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& v);

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor);
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, std::size_t factor);

// NCHW <-> N x (H*W) x C
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x);
template <typename T>
Tensor<T> from_tokens(const Tensor<T>& tokens, std::size_t height, std::size_t width);

namespace kernels {

// C[M,N] (+)= op(A) * op(B), row-major, op = optional transpose.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const T* a, const T* b, T* c, bool accumulate);

}  // namespace kernels

}  // namespace pmatte
