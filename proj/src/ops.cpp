#include "promptmatte/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

#include "promptmatte/errors.hpp"

namespace pmatte {

using detail::grad_buffer;
using detail::ImplPtr;

namespace kernels {

namespace {

// C[4, NV*lanes] += A[4, k] * B[k, NV*lanes]. A element (r, p) lives at
// a[r * ars + p * acs] so transposed operands need no copy.
template <typename T, int NV>
struct Tile {
  static constexpr std::size_t width = 4 * NV;
  static void run(const T* a, std::size_t ars, std::size_t acs, std::size_t k, const T* b,
                  std::size_t ldb, T* c, std::size_t ldc) {
    T acc[4][width];
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t j = 0; j < width; ++j) acc[r][j] = c[r * ldc + j];
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t r = 0; r < 4; ++r) {
        const T av = a[r * ars + p * acs];
        for (std::size_t j = 0; j < width; ++j) acc[r][j] = std::fma(av, b[p * ldb + j], acc[r][j]);
      }
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t j = 0; j < width; ++j) c[r * ldc + j] = acc[r][j];
  }
};

#if defined(__AVX2__) && defined(__FMA__)
template <typename T>
struct Avx;

template <>
struct Avx<float> {
  using V = __m256;
  static constexpr std::size_t lanes = 8;
  static V load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, V v) { _mm256_storeu_ps(p, v); }
  static V bcast(float v) { return _mm256_set1_ps(v); }
  static V fma(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
};

template <>
struct Avx<double> {
  using V = __m256d;
  static constexpr std::size_t lanes = 4;
  static V load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, V v) { _mm256_storeu_pd(p, v); }
  static V bcast(double v) { return _mm256_set1_pd(v); }
  static V fma(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
};

template <typename T, int NV>
struct AvxTile {
  using A = Avx<T>;
  static constexpr std::size_t width = NV * A::lanes;
  static void run(const T* a, std::size_t ars, std::size_t acs, std::size_t k, const T* b,
                  std::size_t ldb, T* c, std::size_t ldc) {
    typename A::V acc[4][NV];
    for (int r = 0; r < 4; ++r)
      for (int v = 0; v < NV; ++v) acc[r][v] = A::load(c + r * ldc + v * A::lanes);
    for (std::size_t p = 0; p < k; ++p) {
      typename A::V bv[NV];
      for (int v = 0; v < NV; ++v) bv[v] = A::load(b + p * ldb + v * A::lanes);
      for (int r = 0; r < 4; ++r) {
        const auto av = A::bcast(a[r * ars + p * acs]);
        for (int v = 0; v < NV; ++v) acc[r][v] = A::fma(av, bv[v], acc[r][v]);
      }
    }
    for (int r = 0; r < 4; ++r)
      for (int v = 0; v < NV; ++v) A::store(c + r * ldc + v * A::lanes, acc[r][v]);
  }
};

template <typename T>
using WideTile = AvxTile<T, 2>;
template <typename T>
using NarrowTile = AvxTile<T, 1>;
#else
template <typename T>
using WideTile = Tile<T, 4>;
template <typename T>
using NarrowTile = Tile<T, 2>;
#endif

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  std::vector<T> b_buf;
  if (trans_b) {
    // b is stored n x k
    b_buf.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) b_buf[p * n + j] = b[j * k + p];
    b = b_buf.data();
  }
  // a is m x k, or k x m when transposed
  const std::size_t ars = trans_a ? 1 : k;
  const std::size_t acs = trans_a ? m : 1;
  // Every C element accumulates over p in ascending order with a fused
  // multiply-add, so vector tiles and scalar edges round identically.
  std::size_t i0 = 0;
  for (; i0 + 4 <= m; i0 += 4) {
    const T* ab = a + i0 * ars;
    std::size_t j0 = 0;
    for (; j0 + WideTile<T>::width <= n; j0 += WideTile<T>::width)
      WideTile<T>::run(ab, ars, acs, k, b + j0, n, c + i0 * n + j0, n);
    for (; j0 + NarrowTile<T>::width <= n; j0 += NarrowTile<T>::width)
      NarrowTile<T>::run(ab, ars, acs, k, b + j0, n, c + i0 * n + j0, n);
    if (j0 == n) continue;
    for (std::size_t r = 0; r < 4; ++r) {
      T* __restrict crow = c + (i0 + r) * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ab[r * ars + p * acs];
        const T* __restrict brow = b + p * n;
        for (std::size_t j = j0; j < n; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
      }
    }
  }
  for (std::size_t i = i0; i < m; ++i) {
    T* __restrict crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * ars + p * acs];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
    }
  }
}

template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t, const float*,
                          const float*, float*, bool);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t, const double*,
                           const double*, double*, bool);

}  // namespace kernels

namespace {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

template <typename T, typename F, typename D>
Tensor<T> unary(const char* op, const Tensor<T>& a, F f, D dfdx) {
  auto in = a.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_result<T>(op, a.shape(), std::move(out), {a},
                        [dfdx](const std::vector<T>& y, const std::vector<T>& g,
                               std::span<const ImplPtr<T>> ins) {
                          auto& x = *ins[0];
                          if (!x.requires_grad) return;
                          auto& gx = grad_buffer(x);
                          for (std::size_t i = 0; i < g.size(); ++i)
                            gx[i] += g[i] * dfdx(x.data[i], y[i]);
                        });
}

template <typename T>
T sigmoid_scalar(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return make_result<T>("add", a.shape(), std::move(out), {a, b},
                        [](const std::vector<T>&, const std::vector<T>& g,
                           std::span<const ImplPtr<T>> ins) {
                          for (const auto& in : ins) {
                            if (!in->requires_grad) continue;
                            auto& gi = grad_buffer(*in);
                            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                          }
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a, b},
                        [](const std::vector<T>&, const std::vector<T>& g,
                           std::span<const ImplPtr<T>> ins) {
                          if (ins[0]->requires_grad) {
                            auto& ga = grad_buffer(*ins[0]);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (ins[1]->requires_grad) {
                            auto& gb = grad_buffer(*ins[1]);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                          }
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b},
                        [](const std::vector<T>&, const std::vector<T>& g,
                           std::span<const ImplPtr<T>> ins) {
                          const auto& xa = ins[0]->data;
                          const auto& xb = ins[1]->data;
                          if (ins[0]->requires_grad) {
                            auto& ga = grad_buffer(*ins[0]);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * xb[i];
                          }
                          if (ins[1]->requires_grad) {
                            auto& gb = grad_buffer(*ins[1]);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xa[i];
                          }
                        });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary<T>("add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return unary<T>("scale", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary<T>(
      "abs", a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > 0 ? T(1) : (x < 0 ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return unary<T>(
      "silu", a, [](T x) { return x * sigmoid_scalar(x); },
      [](T x, T) {
        T s = sigmoid_scalar(x);
        return s + x * s * (T(1) - s);
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary<T>(
      "sigmoid", a, [](T x) { return sigmoid_scalar(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> log_eps(const Tensor<T>& a, T eps) {
  for (T v : a.data()) {
    if (v + eps <= T(0)) throw ArgumentError("log_eps: argument must exceed -eps");
  }
  return unary<T>(
      "log_eps", a, [eps](T x) { return std::log(x + eps); },
      [eps](T x, T) { return T(1) / (x + eps); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto x = a.data();
  T total = std::accumulate(x.begin(), x.end(), T(0));
  return make_result<T>("sum", Shape{1}, {total}, {a},
                        [](const std::vector<T>&, const std::vector<T>& g,
                           std::span<const ImplPtr<T>> ins) {
                          if (!ins[0]->requires_grad) return;
                          auto& gi = grad_buffer(*ins[0]);
                          for (T& v : gi) v += g[0];
                        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  auto x = a.data();
  const T n = static_cast<T>(x.size());
  T total = std::accumulate(x.begin(), x.end(), T(0));
  return make_result<T>("mean", Shape{1}, {total / n}, {a},
                        [n](const std::vector<T>&, const std::vector<T>& g,
                            std::span<const ImplPtr<T>> ins) {
                          if (!ins[0]->requires_grad) return;
                          auto& gi = grad_buffer(*ins[0]);
                          const T d = g[0] / n;
                          for (T& v : gi) v += d;
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  auto x = a.data();
  return make_result<T>("reshape", std::move(shape), std::vector<T>(x.begin(), x.end()), {a},
                        [](const std::vector<T>&, const std::vector<T>& g,
                           std::span<const ImplPtr<T>> ins) {
                          if (!ins[0]->requires_grad) return;
                          auto& gi = grad_buffer(*ins[0]);
                          for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                        });
}

namespace {

// Maps flat output index -> flat input index for a permutation.
std::vector<std::size_t> permutation_index(const Shape& in_shape,
                                           const std::vector<std::size_t>& axes) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[axes[i]];
  const std::size_t n = shape_numel(in_shape);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(rank, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < rank; ++d) src += counter[d] * in_strides[axes[d]];
    index[o] = src;
    for (std::size_t d = rank; d-- > 0;) {
      if (++counter[d] < out_shape[d]) break;
      counter[d] = 0;
    }
  }
  return index;
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  const Shape& in_shape = a.shape();
  if (axes.size() != in_shape.size()) throw DimensionError("permute: axis count mismatch");
  std::vector<bool> seen(axes.size(), false);
  for (std::size_t ax : axes) {
    if (ax >= axes.size() || seen[ax]) throw ArgumentError("permute: invalid axis order");
    seen[ax] = true;
  }
  Shape out_shape(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = in_shape[axes[i]];
  auto index = permutation_index(in_shape, axes);
  auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x[index[o]];
  return make_result<T>("permute", std::move(out_shape), std::move(out), {a},
                        [index = std::move(index)](const std::vector<T>&, const std::vector<T>& g,
                                                   std::span<const ImplPtr<T>> ins) {
                          if (!ins[0]->requires_grad) return;
                          auto& gi = grad_buffer(*ins[0]);
                          for (std::size_t o = 0; o < g.size(); ++o) gi[index[o]] += g[o];
                        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ArgumentError("concat: no operands");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        throw DimensionError("concat: extent mismatch " + shape_str(s) + " vs " +
                             shape_str(first));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  std::vector<std::size_t> chunk(parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i) chunk[i] = parts[i].dim(axis) * inner;
  const std::size_t row = out_shape[axis] * inner;
  std::vector<T> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    auto x = parts[i].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.data() + o * chunk[i], chunk[i], out.data() + o * row + offset);
    }
    offset += chunk[i];
  }
  return make_result<T>("concat", std::move(out_shape), std::move(out), parts,
                        [chunk, outer, row](const std::vector<T>&, const std::vector<T>& g,
                                            std::span<const ImplPtr<T>> ins) {
                          std::size_t off = 0;
                          for (std::size_t i = 0; i < ins.size(); ++i) {
                            if (ins[i]->requires_grad) {
                              auto& gi = grad_buffer(*ins[i]);
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t j = 0; j < chunk[i]; ++j)
                                  gi[o * chunk[i] + j] += g[o * row + off + j];
                            }
                            off += chunk[i];
                          }
                        });
}

template <typename T>
Tensor<T> diff(const Tensor<T>& a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw DimensionError("diff: axis out of range");
  if (s[axis] < 2) throw DimensionError("diff: axis extent must be at least 2");
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t len = s[axis];
  Shape out_shape = s;
  out_shape[axis] = len - 1;
  auto x = a.data();
  std::vector<T> out(shape_numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i + 1 < len; ++i)
      for (std::size_t j = 0; j < inner; ++j)
        out[(o * (len - 1) + i) * inner + j] =
            x[(o * len + i + 1) * inner + j] - x[(o * len + i) * inner + j];
  return make_result<T>("diff", std::move(out_shape), std::move(out), {a},
                        [outer, inner, len](const std::vector<T>&, const std::vector<T>& g,
                                            std::span<const ImplPtr<T>> ins) {
                          if (!ins[0]->requires_grad) return;
                          auto& gi = grad_buffer(*ins[0]);
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i + 1 < len; ++i)
                              for (std::size_t j = 0; j < inner; ++j) {
                                const T v = g[(o * (len - 1) + i) * inner + j];
                                gi[(o * len + i + 1) * inner + j] += v;
                                gi[(o * len + i) * inner + j] -= v;
                              }
                        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank("linear weight", weight, 2);
  const std::size_t d_out = weight.dim(0);
  const std::size_t d_in = weight.dim(1);
  if (x.shape().back() != d_in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{d_out}) throw DimensionError("linear: bias extent");
  const std::size_t rows = x.numel() / d_in;
  Shape out_shape = x.shape();
  out_shape.back() = d_out;
  std::vector<T> out(rows * d_out);
  kernels::gemm<T>(false, true, rows, d_out, d_in, x.data().data(), weight.data().data(),
                   out.data(), false);
  if (has_bias) {
    auto b = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d_out; ++j) out[r * d_out + j] += b[j];
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(
      "linear", std::move(out_shape), std::move(out), std::move(inputs),
      [rows, d_in, d_out](const std::vector<T>&, const std::vector<T>& g,
                          std::span<const ImplPtr<T>> ins) {
        auto& xi = *ins[0];
        auto& wi = *ins[1];
        if (xi.requires_grad)
          kernels::gemm<T>(false, false, rows, d_in, d_out, g.data(), wi.data.data(),
                           grad_buffer(xi).data(), true);
        if (wi.requires_grad)
          kernels::gemm<T>(true, false, d_out, d_in, rows, g.data(), xi.data.data(),
                           grad_buffer(wi).data(), true);
        if (ins.size() > 2 && ins[2]->requires_grad) {
          auto& gb = grad_buffer(*ins[2]);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d_out; ++j) gb[j] += g[r * d_out + j];
        }
      });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  const std::size_t batch = a.dim(0);
  const std::size_t m = a.dim(1);
  const std::size_t k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t kb = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch || kb != k) {
    throw DimensionError("bmm: incompatible " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(batch * m * n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < batch; ++i)
    kernels::gemm<T>(false, transpose_b, m, n, k, pa + i * m * k, pb + i * k * n,
                     out.data() + i * m * n, false);
  return make_result<T>(
      "bmm", Shape{batch, m, n}, std::move(out), {a, b},
      [batch, m, n, k, transpose_b](const std::vector<T>&, const std::vector<T>& g,
                                    std::span<const ImplPtr<T>> ins) {
        auto& ai = *ins[0];
        auto& bi = *ins[1];
        for (std::size_t i = 0; i < batch; ++i) {
          const T* gi = g.data() + i * m * n;
          if (ai.requires_grad) {
            // da = g * b^T  (b: k x n)   or  g * b  (b stored n x k)
            kernels::gemm<T>(false, !transpose_b, m, k, n, gi, bi.data.data() + i * k * n,
                             grad_buffer(ai).data() + i * m * k, true);
          }
          if (bi.requires_grad) {
            if (transpose_b) {
              kernels::gemm<T>(true, false, n, k, m, gi, ai.data.data() + i * m * k,
                               grad_buffer(bi).data() + i * k * n, true);
            } else {
              kernels::gemm<T>(true, false, k, n, m, ai.data.data() + i * m * k, gi,
                               grad_buffer(bi).data() + i * k * n, true);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> add_key_bias(const Tensor<T>& scores, const Tensor<T>& bias, std::size_t heads) {
  require_rank("add_key_bias scores", scores, 3);
  require_rank("add_key_bias bias", bias, 2);
  const std::size_t b = scores.dim(0);
  const std::size_t lq = scores.dim(1);
  const std::size_t lk = scores.dim(2);
  if (heads == 0 || bias.dim(0) * heads != b || bias.dim(1) != lk) {
    throw DimensionError("add_key_bias: bias " + shape_str(bias.shape()) +
                         " does not match scores " + shape_str(scores.shape()));
  }
  auto s = scores.data();
  auto m = bias.data();
  std::vector<T> out(s.begin(), s.end());
  for (std::size_t i = 0; i < b; ++i) {
    const T* mrow = m.data() + (i / heads) * lk;
    for (std::size_t q = 0; q < lq; ++q) {
      T* row = out.data() + (i * lq + q) * lk;
      for (std::size_t j = 0; j < lk; ++j) row[j] += mrow[j];
    }
  }
  return make_result<T>("add_key_bias", scores.shape(), std::move(out), {scores, bias},
                        [b, lq, lk, heads](const std::vector<T>&, const std::vector<T>& g,
                                           std::span<const ImplPtr<T>> ins) {
                          if (ins[0]->requires_grad) {
                            auto& gs = grad_buffer(*ins[0]);
                            for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
                          }
                          if (ins[1]->requires_grad) {
                            auto& gm = grad_buffer(*ins[1]);
                            for (std::size_t i = 0; i < b; ++i) {
                              T* mrow = gm.data() + (i / heads) * lk;
                              for (std::size_t q = 0; q < lq; ++q) {
                                const T* row = g.data() + (i * lq + q) * lk;
                                for (std::size_t j = 0; j < lk; ++j) mrow[j] += row[j];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& logits) {
  const std::size_t cols = logits.shape().back();
  const std::size_t rows = logits.numel() / cols;
  auto x = logits.data();
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    T* o = out.data() + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, in[j]);
    if (!std::isfinite(mx)) throw ArgumentError("softmax: row has no finite logit");
    T total = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < cols; ++j) o[j] /= total;
  }
  return make_result<T>("softmax", logits.shape(), std::move(out), {logits},
                        [rows, cols](const std::vector<T>& y, const std::vector<T>& g,
                                     std::span<const ImplPtr<T>> ins) {
                          if (!ins[0]->requires_grad) return;
                          auto& gx = grad_buffer(*ins[0]);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* yr = y.data() + r * cols;
                            const T* gr = g.data() + r * cols;
                            T dot = 0;
                            for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
                            for (std::size_t j = 0; j < cols; ++j)
                              gx[r * cols + j] += yr[j] * (gr[j] - dot);
                          }
                        });
}

namespace {

struct ConvGeom {
  std::size_t channels, height, width, kh, kw, out_h, out_w;
  std::size_t stride, pad;
  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t p = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* dst = cols + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          T* drow = dst + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill_n(drow, g.out_w, T(0));
            continue;
          }
          const T* srow = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            drow[ox] = (ix < 0 || ix >= static_cast<long>(g.width))
                           ? T(0)
                           : srow[static_cast<std::size_t>(ix)];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* x) {
  const std::size_t p = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* src = cols + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          T* xrow = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const T* srow = src + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.width))
              xrow[static_cast<std::size_t>(ix)] += srow[ox];
          }
        }
      }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding) {
  if (stride <= 0) throw ArgumentError("conv2d: stride must be positive");
  if (padding < 0) throw ArgumentError("conv2d: padding must be non-negative");
  require_rank("conv2d input", input, 4);
  require_rank("conv2d weight", weight, 4);
  const std::size_t n = input.dim(0);
  const std::size_t out_c = weight.dim(0);
  ConvGeom geo{input.dim(1), input.dim(2), input.dim(3), weight.dim(2), weight.dim(3), 0, 0,
               static_cast<std::size_t>(stride), static_cast<std::size_t>(padding)};
  if (weight.dim(1) != geo.channels) {
    throw DimensionError("conv2d: weight " + shape_str(weight.shape()) +
                         " does not match input " + shape_str(input.shape()));
  }
  if (geo.height + 2 * geo.pad < geo.kh || geo.width + 2 * geo.pad < geo.kw) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  geo.out_h = (geo.height + 2 * geo.pad - geo.kh) / geo.stride + 1;
  geo.out_w = (geo.width + 2 * geo.pad - geo.kw) / geo.stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{out_c}) throw DimensionError("conv2d: bias extent");

  const std::size_t in_sz = geo.channels * geo.height * geo.width;
  const std::size_t out_sz = out_c * geo.cols();
  std::vector<T> cols(geo.rows() * geo.cols());
  std::vector<T> out(n * out_sz);
  auto x = input.data();
  auto w = weight.data();
  for (std::size_t b = 0; b < n; ++b) {
    im2col(x.data() + b * in_sz, geo, cols.data());
    T* ob = out.data() + b * out_sz;
    kernels::gemm<T>(false, false, out_c, geo.cols(), geo.rows(), w.data(), cols.data(), ob,
                     false);
    if (has_bias) {
      auto bv = bias.data();
      for (std::size_t o = 0; o < out_c; ++o) {
        T* row = ob + o * geo.cols();
        for (std::size_t p = 0; p < geo.cols(); ++p) row[p] += bv[o];
      }
    }
  }
  std::vector<Tensor<T>> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(
      "conv2d", Shape{n, out_c, geo.out_h, geo.out_w}, std::move(out), std::move(inputs),
      [geo, n, out_c, in_sz, out_sz](const std::vector<T>&, const std::vector<T>& g,
                                     std::span<const ImplPtr<T>> ins) {
        auto& xi = *ins[0];
        auto& wi = *ins[1];
        std::vector<T> cols(geo.rows() * geo.cols());
        for (std::size_t b = 0; b < n; ++b) {
          const T* gb = g.data() + b * out_sz;
          if (wi.requires_grad) {
            im2col(xi.data.data() + b * in_sz, geo, cols.data());
            kernels::gemm<T>(false, true, out_c, geo.rows(), geo.cols(), gb, cols.data(),
                             grad_buffer(wi).data(), true);
          }
          if (xi.requires_grad) {
            kernels::gemm<T>(true, false, geo.rows(), geo.cols(), out_c, wi.data.data(), gb,
                             cols.data(), false);
            col2im_add(cols.data(), geo, grad_buffer(xi).data() + b * in_sz);
          }
          if (ins.size() > 2 && ins[2]->requires_grad) {
            auto& gbias = grad_buffer(*ins[2]);
            for (std::size_t o = 0; o < out_c; ++o) {
              const T* row = gb + o * geo.cols();
              T acc = 0;
              for (std::size_t p = 0; p < geo.cols(); ++p) acc += row[p];
              gbias[o] += acc;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& input, std::size_t groups, const Tensor<T>& scale,
                     const Tensor<T>& shift, T eps) {
  require_rank("group_norm", input, 4);
  const std::size_t n = input.dim(0);
  const std::size_t c = input.dim(1);
  const std::size_t hw = input.dim(2) * input.dim(3);
  if (groups == 0 || c % groups != 0) {
    throw ArgumentError("group_norm: " + std::to_string(groups) + " groups do not divide " +
                        std::to_string(c) + " channels");
  }
  if (scale.shape() != Shape{c} || shift.shape() != Shape{c}) {
    throw DimensionError("group_norm: scale/shift must have one entry per channel");
  }
  const std::size_t cpg = c / groups;
  const std::size_t m = cpg * hw;
  auto x = input.data();
  auto sc = scale.data();
  auto sh = shift.data();
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(n * groups);
  std::vector<T> out(x.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (b * c + gi * cpg) * hw;
      T mu = 0;
      for (std::size_t i = 0; i < m; ++i) mu += x[base + i];
      mu /= static_cast<T>(m);
      T var = 0;
      for (std::size_t i = 0; i < m; ++i) {
        const T d = x[base + i] - mu;
        var += d * d;
      }
      var /= static_cast<T>(m);
      const T inv = T(1) / std::sqrt(var + eps);
      inv_std[b * groups + gi] = inv;
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t ch = gi * cpg + i / hw;
        const T xh = (x[base + i] - mu) * inv;
        xhat[base + i] = xh;
        out[base + i] = xh * sc[ch] + sh[ch];
      }
    }
  return make_result<T>(
      "group_norm", input.shape(), std::move(out), {input, scale, shift},
      [n, c, hw, groups, cpg, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          const std::vector<T>&, const std::vector<T>& g, std::span<const ImplPtr<T>> ins) {
        auto& xi = *ins[0];
        auto& si = *ins[1];
        auto& hi = *ins[2];
        if (si.requires_grad || hi.requires_grad) {
          std::vector<T> gs(c, T(0));
          std::vector<T> gh(c, T(0));
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t base = (b * c + ch) * hw;
              T a = 0, s = 0;
              for (std::size_t i = 0; i < hw; ++i) {
                a += g[base + i] * xhat[base + i];
                s += g[base + i];
              }
              gs[ch] += a;
              gh[ch] += s;
            }
          if (si.requires_grad) {
            auto& dst = grad_buffer(si);
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += gs[ch];
          }
          if (hi.requires_grad) {
            auto& dst = grad_buffer(hi);
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += gh[ch];
          }
        }
        if (!xi.requires_grad) return;
        auto& gx = grad_buffer(xi);
        const auto& sc = si.data;
        const T mt = static_cast<T>(m);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = (b * c + gi * cpg) * hw;
            T sum_d = 0, sum_dx = 0;
            for (std::size_t i = 0; i < m; ++i) {
              const T d = g[base + i] * sc[gi * cpg + i / hw];
              sum_d += d;
              sum_dx += d * xhat[base + i];
            }
            const T inv = inv_std[b * groups + gi];
            for (std::size_t i = 0; i < m; ++i) {
              const T d = g[base + i] * sc[gi * cpg + i / hw];
              gx[base + i] += inv / mt * (mt * d - sum_d - xhat[base + i] * sum_dx);
            }
          }
      });
}

template <typename T>
Tensor<T> norm_act(const Tensor<T>& input, std::size_t groups, const Tensor<T>& scale,
                   const Tensor<T>& shift, T eps) {
  return silu(group_norm(input, groups, scale, shift, eps));
}

template <typename T>
Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& v) {
  require_rank("add_channel", x, 4);
  require_rank("add_channel vector", v, 2);
  const std::size_t n = x.dim(0);
  const std::size_t c = x.dim(1);
  const std::size_t hw = x.dim(2) * x.dim(3);
  if (v.dim(0) != n || v.dim(1) != c) {
    throw DimensionError("add_channel: vector " + shape_str(v.shape()) + " vs " +
                         shape_str(x.shape()));
  }
  auto xs = x.data();
  auto vs = v.data();
  std::vector<T> out(xs.begin(), xs.end());
  for (std::size_t i = 0; i < n * c; ++i)
    for (std::size_t p = 0; p < hw; ++p) out[i * hw + p] += vs[i];
  return make_result<T>("add_channel", x.shape(), std::move(out), {x, v},
                        [n, c, hw](const std::vector<T>&, const std::vector<T>& g,
                                   std::span<const ImplPtr<T>> ins) {
                          if (ins[0]->requires_grad) {
                            auto& gx = grad_buffer(*ins[0]);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          }
                          if (ins[1]->requires_grad) {
                            auto& gv = grad_buffer(*ins[1]);
                            for (std::size_t i = 0; i < n * c; ++i) {
                              T acc = 0;
                              for (std::size_t p = 0; p < hw; ++p) acc += g[i * hw + p];
                              gv[i] += acc;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
  require_rank("upsample_nearest", x, 4);
  if (factor == 0) throw ArgumentError("upsample_nearest: factor must be positive");
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  const std::size_t oh = h * factor;
  const std::size_t ow = w * factor;
  auto xs = x.data();
  std::vector<T> out(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        out[(p * oh + y) * ow + xx] = xs[(p * h + y / factor) * w + xx / factor];
  return make_result<T>("upsample_nearest", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out),
                        {x},
                        [planes, h, w, factor](const std::vector<T>&, const std::vector<T>& g,
                                               std::span<const ImplPtr<T>> ins) {
                          if (!ins[0]->requires_grad) return;
                          auto& gx = grad_buffer(*ins[0]);
                          const std::size_t oh = h * factor;
                          const std::size_t ow = w * factor;
                          for (std::size_t p = 0; p < planes; ++p)
                            for (std::size_t y = 0; y < oh; ++y)
                              for (std::size_t xx = 0; xx < ow; ++xx)
                                gx[(p * h + y / factor) * w + xx / factor] +=
                                    g[(p * oh + y) * ow + xx];
                        });
}

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, std::size_t factor) {
  require_rank("avg_pool", x, 4);
  if (factor == 0) throw ArgumentError("avg_pool: factor must be positive");
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  if (h % factor || w % factor) throw ArgumentError("avg_pool: extents not divisible by factor");
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t oh = h / factor;
  const std::size_t ow = w / factor;
  const T norm = T(1) / static_cast<T>(factor * factor);
  auto xs = x.data();
  std::vector<T> out(planes * oh * ow, T(0));
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        out[(p * oh + y / factor) * ow + xx / factor] += xs[(p * h + y) * w + xx];
  for (T& v : out) v *= norm;
  return make_result<T>("avg_pool", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                        [planes, h, w, factor, norm](const std::vector<T>&,
                                                     const std::vector<T>& g,
                                                     std::span<const ImplPtr<T>> ins) {
                          if (!ins[0]->requires_grad) return;
                          auto& gx = grad_buffer(*ins[0]);
                          const std::size_t oh = h / factor;
                          const std::size_t ow = w / factor;
                          for (std::size_t p = 0; p < planes; ++p)
                            for (std::size_t y = 0; y < h; ++y)
                              for (std::size_t xx = 0; xx < w; ++xx)
                                gx[(p * h + y) * w + xx] +=
                                    norm * g[(p * oh + y / factor) * ow + xx / factor];
                        });
}

template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  require_rank("to_tokens", x, 4);
  auto t = permute(x, {0, 2, 3, 1});
  return reshape(t, Shape{x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& tokens, std::size_t height, std::size_t width) {
  require_rank("from_tokens", tokens, 3);
  if (tokens.dim(1) != height * width) throw DimensionError("from_tokens: token count mismatch");
  auto t = reshape(tokens, Shape{tokens.dim(0), height, width, tokens.dim(2)});
  return permute(t, {0, 3, 1, 2});
}

#define PMATTE_INSTANTIATE(T)                                                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                         \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> abs(const Tensor<T>&);                                                   \
  template Tensor<T> silu(const Tensor<T>&);                                                  \
  template Tensor<T> sigmoid(const Tensor<T>&);                                               \
  template Tensor<T> log_eps(const Tensor<T>&, T);                                            \
  template Tensor<T> sum(const Tensor<T>&);                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                  \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                        \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);              \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                      \
  template Tensor<T> diff(const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool);                           \
  template Tensor<T> add_key_bias(const Tensor<T>&, const Tensor<T>&, std::size_t);           \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                       \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);  \
  template Tensor<T> group_norm(const Tensor<T>&, std::size_t, const Tensor<T>&,              \
                                const Tensor<T>&, T);                                         \
  template Tensor<T> norm_act(const Tensor<T>&, std::size_t, const Tensor<T>&,                \
                              const Tensor<T>&, T);                                           \
  template Tensor<T> add_channel(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> upsample_nearest(const Tensor<T>&, std::size_t);                         \
  template Tensor<T> avg_pool(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> to_tokens(const Tensor<T>&);                                             \
  template Tensor<T> from_tokens(const Tensor<T>&, std::size_t, std::size_t);

PMATTE_INSTANTIATE(float)
PMATTE_INSTANTIATE(double)
#undef PMATTE_INSTANTIATE

}  // namespace pmatte
