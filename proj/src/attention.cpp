#include "promptmatte/attention.hpp"

#include <algorithm>
#include <cmath>

#include "promptmatte/errors.hpp"
#include "promptmatte/ops.hpp"

namespace pmatte {

namespace {

// [N, L, C] -> [N*heads, L, C/heads]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& t, std::size_t n, std::size_t len, std::size_t heads) {
  const std::size_t dk = t.dim(2) / heads;
  return reshape(permute(reshape(t, {n, len, heads, dk}), {0, 2, 1, 3}), {n * heads, len, dk});
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& t, std::size_t n, std::size_t len, std::size_t heads) {
  const std::size_t dk = t.dim(2);
  return reshape(permute(reshape(t, {n, heads, len, dk}), {0, 2, 1, 3}), {n, len, heads * dk});
}

template <typename T>
void record(AttentionProbe* probe, const Tensor<T>& weights, std::size_t n, std::size_t heads) {
  if (!probe) return;
  probe->batch = n;
  probe->heads = heads;
  probe->queries = weights.dim(1);
  probe->keys = weights.dim(2);
  probe->weights.assign(weights.data().begin(), weights.data().end());
  probe->recorded = true;
}

// softmax(q k^T / sqrt(dk) + bias) v with q [N, Lq, C], k and v [N, Lk, C].
template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& bias,
                 std::size_t heads, AttentionProbe* probe) {
  const std::size_t n = q.dim(0);
  const std::size_t lq = q.dim(1);
  const std::size_t lk = k.dim(1);
  const std::size_t channels = q.dim(2);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(channels / heads));
  auto qh = split_heads(q, n, lq, heads);
  auto kh = split_heads(k, n, lk, heads);
  auto vh = split_heads(v, n, lk, heads);
  auto scores = scale(bmm(qh, kh, true), inv_sqrt);
  if (bias.defined()) scores = add_key_bias(scores, bias, heads);
  auto weights = softmax_lastdim(scores);
  record(probe, weights, n, heads);
  return merge_heads(bmm(weights, vh), n, lq, heads);
}

template <typename T>
void check_heads(std::size_t channels, std::size_t heads) {
  if (heads == 0 || channels % heads != 0) {
    throw DimensionError("channel width " + std::to_string(channels) +
                         " is not divisible by head count " + std::to_string(heads));
  }
}

}  // namespace

template <typename T>
void init_self_attention(ParamStore<T>& store, const std::string& prefix, std::size_t channels,
                         Rng& rng) {
  for (const char* name : {".wq", ".wk", ".wv", ".wo"}) {
    store.add(prefix + name, init_uniform<T>({channels, channels}, channels, rng));
  }
  store.add(prefix + ".bo", init_zeros<T>({channels}));
}

template <typename T>
SelfAttentionParams<T> bind_self_attention(const ParamStore<T>& store, const std::string& prefix,
                                           std::size_t heads) {
  SelfAttentionParams<T> p{store.get(prefix + ".wq"), store.get(prefix + ".wk"),
                           store.get(prefix + ".wv"), store.get(prefix + ".wo"),
                           store.get(prefix + ".bo"), heads};
  check_heads<T>(p.wq.dim(0), heads);
  return p;
}

template <typename T>
void init_cross_attention(ParamStore<T>& store, const std::string& prefix, std::size_t channels,
                          std::size_t prompt_channels, std::size_t context_width, Rng& rng) {
  store.add(prefix + ".zero_w", init_zeros<T>({context_width, prompt_channels, 1, 1}));
  store.add(prefix + ".zero_b", init_zeros<T>({context_width}));
  store.add(prefix + ".wq", init_uniform<T>({channels, channels}, channels, rng));
  store.add(prefix + ".wk", init_uniform<T>({channels, context_width}, context_width, rng));
  store.add(prefix + ".bk", init_uniform<T>({channels}, context_width, rng));
  store.add(prefix + ".wv", init_uniform<T>({channels, context_width}, context_width, rng));
  store.add(prefix + ".bv", init_uniform<T>({channels}, context_width, rng));
  store.add(prefix + ".wo", init_uniform<T>({channels, channels}, channels, rng));
  store.add(prefix + ".bo", init_zeros<T>({channels}));
}

template <typename T>
CrossAttentionParams<T> bind_cross_attention(const ParamStore<T>& store, const std::string& prefix,
                                             std::size_t heads) {
  CrossAttentionParams<T> p{store.get(prefix + ".zero_w"), store.get(prefix + ".zero_b"),
                            store.get(prefix + ".wq"),     store.get(prefix + ".wk"),
                            store.get(prefix + ".bk"),     store.get(prefix + ".wv"),
                            store.get(prefix + ".bv"),     store.get(prefix + ".wo"),
                            store.get(prefix + ".bo"),     heads};
  check_heads<T>(p.wq.dim(0), heads);
  return p;
}

template <typename T>
Tensor<T> mask_tensor(const std::vector<const AttentionMask*>& masks) {
  if (masks.empty()) throw ArgumentError("mask_tensor: no masks");
  const std::size_t len = masks[0]->values.size();
  std::vector<T> values;
  values.reserve(masks.size() * len);
  for (const AttentionMask* m : masks) {
    if (m->values.size() != len) throw DimensionError("mask_tensor: masks differ in length");
    values.insert(values.end(), m->values.begin(), m->values.end());
  }
  return Tensor<T>({masks.size(), len}, std::move(values));
}

template <typename T>
Tensor<T> masked_self_attention(const Tensor<T>& x, const Tensor<T>& mask,
                                const SelfAttentionParams<T>& params, MaskBiasMode mode,
                                AttentionProbe* probe) {
  if (x.rank() != 3) throw DimensionError("masked_self_attention: expected [N, L, C] input");
  const std::size_t n = x.dim(0);
  const std::size_t len = x.dim(1);
  check_heads<T>(x.dim(2), params.heads);
  Tensor<T> bias;
  if (mask.defined()) {
    if (mask.shape() != Shape{n, len}) {
      throw DimensionError("mask shape " + shape_str(mask.shape()) + " does not match sequence " +
                           shape_str({n, len}));
    }
    bias = mode == MaskBiasMode::kLog
               ? log_eps(mask, static_cast<T>(kMaskEps))
               : scale(add_scalar(mask, T(-1)), static_cast<T>(kLargeNegative));
  }
  const Tensor<T> none;
  auto q = linear(x, params.wq, none);
  auto k = linear(x, params.wk, none);
  auto v = linear(x, params.wv, none);
  return linear(attend(q, k, v, bias, params.heads, probe), params.wo, params.bo);
}

template <typename T>
Tensor<T> prompt_cross_attention(const Tensor<T>& x, const Tensor<T>& prompt_latent,
                                 const CrossAttentionParams<T>& params, AttentionProbe* probe) {
  if (x.rank() != 3) throw DimensionError("prompt_cross_attention: expected [N, L, C] input");
  if (prompt_latent.rank() != 4 || prompt_latent.dim(0) != x.dim(0)) {
    throw DimensionError("prompt_cross_attention: prompt latent must be NCHW with matching batch");
  }
  if (prompt_latent.dim(1) != params.zero_w.dim(1)) {
    throw DimensionError("prompt_cross_attention: prompt latent has " +
                         std::to_string(prompt_latent.dim(1)) + " channels, zero conv expects " +
                         std::to_string(params.zero_w.dim(1)));
  }
  if (params.wk.dim(1) != params.zero_w.dim(0)) {
    throw DimensionError("prompt_cross_attention: zero conv width differs from context width");
  }
  check_heads<T>(x.dim(2), params.heads);
  auto context = to_tokens(conv2d(prompt_latent, params.zero_w, params.zero_b, 1, 0));
  const Tensor<T> none;
  auto q = linear(x, params.wq, none);
  auto k = linear(context, params.wk, params.bk);
  auto v = linear(context, params.wv, params.bv);
  return linear(attend(q, k, v, Tensor<T>(), params.heads, probe), params.wo, params.bo);
}

std::vector<double> context_token_weights(const Image& raster, std::size_t height,
                                          std::size_t width) {
  if (height == 0 || width == 0 || raster.height % height != 0 || raster.width % width != 0) {
    throw ArgumentError("context_token_weights: grid must divide the raster extents");
  }
  const std::size_t fy = raster.height / height;
  const std::size_t fx = raster.width / width;
  std::vector<double> out(height * width, 0.0);
  for (std::size_t y = 0; y < raster.height; ++y)
    for (std::size_t x = 0; x < raster.width; ++x) {
      out[(y / fy) * width + x / fx] += raster.at(y, x, 0);
    }
  for (double& v : out) v /= static_cast<double>(fy * fx);
  return out;
}

AttentionMap export_attention_map(const AttentionProbe& probe, std::size_t sample,
                                  const std::vector<double>& token_weights, std::size_t height,
                                  std::size_t width) {
  if (!probe.recorded) throw StateError("export_attention_map: layer has not run forward");
  if (sample >= probe.batch) throw ArgumentError("export_attention_map: sample out of range");
  if (height * width != probe.queries) {
    throw DimensionError("export_attention_map: grid does not match the query count");
  }
  if (token_weights.size() != probe.keys) {
    throw DimensionError("export_attention_map: one weight per context token is required");
  }
  AttentionMap map{height, width, std::vector<double>(probe.queries, 0.0), false};
  for (std::size_t h = 0; h < probe.heads; ++h)
    for (std::size_t q = 0; q < probe.queries; ++q) {
      double acc = 0.0;
      for (std::size_t k = 0; k < probe.keys; ++k) acc += token_weights[k] * probe.at(sample, h, q, k);
      map.values[q] += acc / static_cast<double>(probe.heads);
    }
  const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
  const double min = *lo;
  const double range = *hi - min;
  // Relative test so per-query sums that agree up to rounding count as constant.
  if (range <= 1e-12 * std::max(1.0, std::abs(*hi))) {
    std::fill(map.values.begin(), map.values.end(), 0.0);
    map.degenerate = true;
    return map;
  }
  for (double& v : map.values) v = (v - min) / range;
  return map;
}

#define PMATTE_INSTANTIATE(T)                                                                     \
  template void init_self_attention<T>(ParamStore<T>&, const std::string&, std::size_t, Rng&);    \
  template SelfAttentionParams<T> bind_self_attention<T>(const ParamStore<T>&, const std::string&, \
                                                         std::size_t);                            \
  template void init_cross_attention<T>(ParamStore<T>&, const std::string&, std::size_t,          \
                                        std::size_t, std::size_t, Rng&);                          \
  template CrossAttentionParams<T> bind_cross_attention<T>(const ParamStore<T>&,                  \
                                                           const std::string&, std::size_t);      \
  template Tensor<T> mask_tensor<T>(const std::vector<const AttentionMask*>&);                   \
  template Tensor<T> masked_self_attention<T>(const Tensor<T>&, const Tensor<T>&,                 \
                                              const SelfAttentionParams<T>&, MaskBiasMode,        \
                                              AttentionProbe*);                                   \
  template Tensor<T> prompt_cross_attention<T>(const Tensor<T>&, const Tensor<T>&,                \
                                               const CrossAttentionParams<T>&, AttentionProbe*);

PMATTE_INSTANTIATE(float)
PMATTE_INSTANTIATE(double)
#undef PMATTE_INSTANTIATE

}  // namespace pmatte
