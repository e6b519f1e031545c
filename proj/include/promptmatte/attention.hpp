#pragma once

// Masked multi-head self-attention and prompt-driven cross-attention.
//
// Masks bias the keys: scores[i, j] += log(M_j + eps) for every query i and
// head, so M == 1 leaves attention unchanged and M == 0 removes key j. The
// cross-attention context is a zero-initialized 1x1 convolution of the
// prompt latent; at initialization the block therefore ignores the prompt.

#include <cstddef>
#include <string>
#include <vector>

#include "promptmatte/image.hpp"
#include "promptmatte/params.hpp"
#include "promptmatte/prompt.hpp"
#include "promptmatte/tensor.hpp"

namespace pmatte {

enum class MaskBiasMode {
  kLog,            // log(M + eps)
  kLargeNegative,  // (M - 1) * 1e4, meant for hard masks
};

inline constexpr double kMaskEps = 1e-6;
inline constexpr double kLargeNegative = 1e4;

template <typename T>
struct SelfAttentionParams {
  Tensor<T> wq, wk, wv;  // [C, C], heads concatenated along the output axis
  Tensor<T> wo, bo;      // [C, C], [C]
  std::size_t heads = 1;
};

template <typename T>
struct CrossAttentionParams {
  Tensor<T> zero_w, zero_b;  // [D_ctx, c', 1, 1], [D_ctx]
  Tensor<T> wq;              // [C, C]
  Tensor<T> wk, bk;          // [C, D_ctx], [C]
  Tensor<T> wv, bv;          // [C, D_ctx], [C]
  Tensor<T> wo, bo;          // [C, C], [C]
  std::size_t heads = 1;
};

// Parameters live in `store` under `prefix + ".wq"` etc.
template <typename T>
void init_self_attention(ParamStore<T>& store, const std::string& prefix, std::size_t channels,
                         Rng& rng);
template <typename T>
SelfAttentionParams<T> bind_self_attention(const ParamStore<T>& store, const std::string& prefix,
                                           std::size_t heads);

template <typename T>
void init_cross_attention(ParamStore<T>& store, const std::string& prefix, std::size_t channels,
                          std::size_t prompt_channels, std::size_t context_width, Rng& rng);
template <typename T>
CrossAttentionParams<T> bind_cross_attention(const ParamStore<T>& store, const std::string& prefix,
                                             std::size_t heads);

// Post-softmax weights of the last forward call, [batch, heads, queries, keys].
struct AttentionProbe {
  std::size_t batch = 0;
  std::size_t heads = 0;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<double> weights;
  bool recorded = false;

  double at(std::size_t n, std::size_t h, std::size_t q, std::size_t k) const {
    return weights[((n * heads + h) * queries + q) * keys + k];
  }
};

// Stacks per-sample masks into an [N, L] tensor.
template <typename T>
Tensor<T> mask_tensor(const std::vector<const AttentionMask*>& masks);

// x [N, L, C]; mask [N, L] or undefined for plain self-attention.
template <typename T>
Tensor<T> masked_self_attention(const Tensor<T>& x, const Tensor<T>& mask,
                                const SelfAttentionParams<T>& params,
                                MaskBiasMode mode = MaskBiasMode::kLog,
                                AttentionProbe* probe = nullptr);

// x [N, L, C]; prompt_latent NCHW [N, c', h', w'] giving h'*w' context tokens.
template <typename T>
Tensor<T> prompt_cross_attention(const Tensor<T>& x, const Tensor<T>& prompt_latent,
                                 const CrossAttentionParams<T>& params,
                                 AttentionProbe* probe = nullptr);

// Occupancy of each context token: the rasterized prompt area-averaged onto
// the h' x w' context grid. Extents must divide the raster's.
std::vector<double> context_token_weights(const Image& prompt_raster, std::size_t height,
                                          std::size_t width);

struct AttentionMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // row-major, min-max normalized to [0,1]
  bool degenerate = false;     // constant map; values are all zero
};

// For each query: sum over heads and context tokens of weight * attention,
// normalized to [0,1] and laid out on the query grid. Uniform token weights
// make every query sum to the same value and produce a degenerate map.
AttentionMap export_attention_map(const AttentionProbe& probe, std::size_t sample,
                                  const std::vector<double>& token_weights, std::size_t height,
                                  std::size_t width);

}  // namespace pmatte
