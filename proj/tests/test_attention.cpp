#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "promptmatte/attention.hpp"
#include "promptmatte/errors.hpp"
#include "promptmatte/gradcheck.hpp"
#include "promptmatte/ops.hpp"
#include "test_helpers.hpp"

using namespace pmatte;
using pmatte::testing::random_tensor;
using pmatte::testing::weighted_sum;

namespace {

using Mat = std::vector<double>;

// y[l, o] = sum_i x[l, i] w[o, i] + b[o]
Mat dense(const double* x, std::size_t rows, std::size_t in, const Tensor<double>& w,
          const Tensor<double>* b) {
  const std::size_t out = w.dim(0);
  Mat y(rows * out, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = b ? b->data()[o] : 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += x[r * in + i] * w.data()[o * in + i];
      y[r * out + o] = acc;
    }
  return y;
}

// Naive multi-head attention for one sample: q [Lq, C], k and v [Lk, C].
Mat naive_attend(const Mat& q, const Mat& k, const Mat& v, std::size_t lq, std::size_t lk,
                 std::size_t c, std::size_t heads, const double* key_bias) {
  const std::size_t dk = c / heads;
  Mat out(lq * c, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < lq; ++i) {
      std::vector<double> s(lk);
      double mx = -1e300;
      for (std::size_t j = 0; j < lk; ++j) {
        double dot = 0.0;
        for (std::size_t d = 0; d < dk; ++d) dot += q[i * c + h * dk + d] * k[j * c + h * dk + d];
        s[j] = dot / std::sqrt(double(dk)) + (key_bias ? key_bias[j] : 0.0);
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < lk; ++j)
        for (std::size_t d = 0; d < dk; ++d) out[i * c + h * dk + d] += s[j] / z * v[j * c + h * dk + d];
    }
  return out;
}

ParamStore<double> self_store(std::size_t c, std::uint64_t seed) {
  ParamStore<double> store;
  Rng rng(seed);
  init_self_attention(store, "sa", c, rng);
  // nonzero output bias so the oracle sees it
  store.get_mut("sa.bo").data_mut()[0] = 0.3;
  return store;
}

ParamStore<double> cross_store(std::size_t c, std::size_t pc, std::size_t ctx, std::uint64_t seed,
                               bool perturb_zero_conv) {
  ParamStore<double> store;
  Rng rng(seed);
  init_cross_attention(store, "ca", c, pc, ctx, rng);
  if (perturb_zero_conv) {
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (double& v : store.get_mut("ca.zero_w").data_mut()) v = u(rng);
    for (double& v : store.get_mut("ca.zero_b").data_mut()) v = u(rng);
  }
  return store;
}

}  // namespace

TEST(masked_self_attention, matches_dense_oracle_with_point_mask) {
  const std::size_t l = 9, c = 8, heads = 2;
  auto store = self_store(c, 1);
  auto p = bind_self_attention(store, "sa", heads);
  std::mt19937_64 rng(2);
  auto x = random_tensor<double>({1, l, c}, rng);
  AttentionMask m = attention_mask_build(VisualPrompt::points({{0.2, 0.7}}), 3, 3);
  auto mt = mask_tensor<double>({&m});
  auto y = masked_self_attention(x, mt, p);

  std::vector<double> bias(l);
  for (std::size_t j = 0; j < l; ++j) bias[j] = std::log(m.values[j] + 1e-6);
  auto q = dense(x.data().data(), l, c, p.wq, nullptr);
  auto k = dense(x.data().data(), l, c, p.wk, nullptr);
  auto v = dense(x.data().data(), l, c, p.wv, nullptr);
  auto mixed = naive_attend(q, k, v, l, l, c, heads, bias.data());
  auto want = dense(mixed.data(), l, c, p.wo, &p.bo);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y.data()[i], want[i], 1e-6);
}

TEST(masked_self_attention, all_ones_mask_equals_unmasked_float32) {
  ParamStore<float> store;
  Rng rng(3);
  init_self_attention(store, "sa", 16, rng);
  auto p = bind_self_attention(store, "sa", 4);
  std::mt19937_64 g(4);
  auto x = random_tensor<float>({2, 12, 16}, g);
  Tensor<float> ones({2, 12}, 1.0f);
  auto a = masked_self_attention(x, ones, p);
  auto b = masked_self_attention(x, Tensor<float>(), p);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-6);
}

TEST(masked_self_attention, zero_key_is_excluded) {
  const std::size_t c = 4;
  auto store = self_store(c, 5);
  auto p = bind_self_attention(store, "sa", 1);
  std::mt19937_64 rng(6);
  auto x = random_tensor<double>({1, 2, c}, rng);
  Tensor<double> m({1, 2}, std::vector<double>{1.0, 0.0});
  AttentionProbe probe;
  auto y = masked_self_attention(x, m, p, MaskBiasMode::kLog, &probe);
  EXPECT_LT(probe.at(0, 0, 0, 1), 1e-5);
  EXPECT_LT(probe.at(0, 0, 1, 1), 1e-5);
  auto v = dense(x.data().data(), 2, c, p.wv, nullptr);
  auto want = dense(v.data(), 1, c, p.wo, &p.bo);
  for (std::size_t q = 0; q < 2; ++q)
    for (std::size_t o = 0; o < c; ++o) EXPECT_NEAR(y.data()[q * c + o], want[o], 1e-4);
}

TEST(masked_self_attention, large_negative_mode_excludes_hard_zeros) {
  auto store = self_store(8, 7);
  auto p = bind_self_attention(store, "sa", 2);
  std::mt19937_64 rng(8);
  auto x = random_tensor<double>({1, 6, 8}, rng);
  Tensor<double> m({1, 6}, std::vector<double>{1, 0, 1, 0, 0, 1});
  AttentionProbe probe;
  masked_self_attention(x, m, p, MaskBiasMode::kLargeNegative, &probe);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t q = 0; q < 6; ++q)
      for (std::size_t k : {1u, 3u, 4u}) EXPECT_LT(probe.at(0, h, q, k), 1e-12);
}

TEST(masked_self_attention, rows_are_stochastic) {
  auto store = self_store(8, 9);
  auto p = bind_self_attention(store, "sa", 4);
  std::mt19937_64 rng(10);
  auto x = random_tensor<double>({2, 16, 8}, rng);
  auto m = random_tensor<double>({2, 16}, rng, 0.0, 1.0);
  AttentionProbe probe;
  masked_self_attention(x, m, p, MaskBiasMode::kLog, &probe);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t h = 0; h < 4; ++h)
      for (std::size_t q = 0; q < 16; ++q) {
        double s = 0.0;
        for (std::size_t k = 0; k < 16; ++k) s += probe.at(n, h, q, k);
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
}

TEST(masked_self_attention, lowering_mask_never_raises_weight) {
  auto store = self_store(8, 11);
  auto p = bind_self_attention(store, "sa", 2);
  std::mt19937_64 rng(12);
  auto x = random_tensor<double>({1, 5, 8}, rng);
  std::vector<double> base = {0.9, 0.7, 1.0, 0.4, 0.8};
  double previous[2][5];
  bool first = true;
  for (double mj : {1.0, 0.8, 0.5, 0.2, 0.05, 0.0}) {
    auto vals = base;
    vals[2] = mj;
    AttentionProbe probe;
    masked_self_attention(x, Tensor<double>({1, 5}, vals), p, MaskBiasMode::kLog, &probe);
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t q = 0; q < 5; ++q) {
        double w = probe.at(0, h, q, 2);
        if (!first) EXPECT_LE(w, previous[h][q] + 1e-15);
        previous[h][q] = w;
      }
    first = false;
  }
}

TEST(masked_self_attention, shape_errors) {
  auto store = self_store(8, 13);
  auto p = bind_self_attention(store, "sa", 2);
  std::mt19937_64 rng(14);
  auto x = random_tensor<double>({1, 4, 8}, rng);
  EXPECT_THROW(masked_self_attention(x, Tensor<double>({1, 5}, 1.0), p), DimensionError);
  EXPECT_THROW(bind_self_attention(store, "sa", 3), DimensionError);
}

TEST(masked_self_attention, gradients_through_input_weights_and_mask) {
  auto store = self_store(4, 15);
  auto p = bind_self_attention(store, "sa", 2);
  std::mt19937_64 rng(16);
  auto x = random_tensor<double>({1, 6, 4}, rng);
  auto m = random_tensor<double>({1, 6}, rng, 0.1, 1.0);
  auto by_x = check_gradient(
      [&](const Tensor<double>& v) { return weighted_sum(masked_self_attention(v, m, p), 1); }, x,
      1e-5, 1e-4);
  EXPECT_TRUE(by_x.passed) << by_x.max_rel_error;
  auto by_m = check_gradient(
      [&](const Tensor<double>& v) { return weighted_sum(masked_self_attention(x, v, p), 2); }, m,
      1e-5, 1e-4);
  EXPECT_TRUE(by_m.passed) << by_m.max_rel_error;
  auto by_wq = check_gradient(
      [&](const Tensor<double>& v) {
        auto q = p;
        q.wq = v;
        return weighted_sum(masked_self_attention(x, m, q), 3);
      },
      p.wq, 1e-5, 1e-4);
  EXPECT_TRUE(by_wq.passed) << by_wq.max_rel_error;
}

TEST(prompt_cross_attention, fresh_zero_conv_ignores_prompt) {
  auto store = cross_store(8, 4, 6, 20, false);
  auto p = bind_cross_attention(store, "ca", 2);
  std::mt19937_64 rng(21);
  auto x = random_tensor<double>({1, 9, 8}, rng);
  auto a = prompt_cross_attention(x, random_tensor<double>({1, 4, 3, 3}, rng), p);
  auto b = prompt_cross_attention(x, random_tensor<double>({1, 4, 3, 3}, rng), p);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(prompt_cross_attention, perturbed_zero_conv_sees_prompt) {
  auto store = cross_store(8, 4, 6, 22, true);
  auto p = bind_cross_attention(store, "ca", 2);
  std::mt19937_64 rng(23);
  auto x = random_tensor<double>({1, 9, 8}, rng);
  auto a = prompt_cross_attention(x, random_tensor<double>({1, 4, 3, 3}, rng), p);
  auto b = prompt_cross_attention(x, random_tensor<double>({1, 4, 3, 3}, rng), p);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a.data()[i] - b.data()[i]));
  EXPECT_GT(diff, 0.0);
}

TEST(prompt_cross_attention, matches_dense_oracle) {
  const std::size_t c = 8, pc = 3, ctx = 5, heads = 2, lq = 6;
  auto store = cross_store(c, pc, ctx, 24, true);
  auto p = bind_cross_attention(store, "ca", heads);
  std::mt19937_64 rng(25);
  auto x = random_tensor<double>({2, lq, c}, rng);
  auto pl = random_tensor<double>({2, pc, 2, 2}, rng);
  auto y = prompt_cross_attention(x, pl, p);
  for (std::size_t n = 0; n < 2; ++n) {
    // context token t = zero_w * prompt[:, t] + zero_b
    Mat context(4 * ctx);
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t o = 0; o < ctx; ++o) {
        double acc = p.zero_b.data()[o];
        for (std::size_t i = 0; i < pc; ++i) acc += p.zero_w.data()[o * pc + i] * pl.data()[(n * pc + i) * 4 + t];
        context[t * ctx + o] = acc;
      }
    auto q = dense(x.data().data() + n * lq * c, lq, c, p.wq, nullptr);
    auto k = dense(context.data(), 4, ctx, p.wk, &p.bk);
    auto v = dense(context.data(), 4, ctx, p.wv, &p.bv);
    auto mixed = naive_attend(q, k, v, lq, 4, c, heads, nullptr);
    auto want = dense(mixed.data(), lq, c, p.wo, &p.bo);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y.data()[n * lq * c + i], want[i], 1e-6);
  }
}

TEST(prompt_cross_attention, width_mismatch) {
  auto store = cross_store(8, 4, 6, 26, false);
  auto p = bind_cross_attention(store, "ca", 2);
  std::mt19937_64 rng(27);
  auto x = random_tensor<double>({1, 9, 8}, rng);
  EXPECT_THROW(prompt_cross_attention(x, random_tensor<double>({1, 3, 3, 3}, rng), p), DimensionError);
  EXPECT_THROW(prompt_cross_attention(x, random_tensor<double>({2, 4, 3, 3}, rng), p), DimensionError);
}

TEST(prompt_cross_attention, gradients) {
  auto store = cross_store(4, 2, 3, 28, true);
  auto p = bind_cross_attention(store, "ca", 2);
  std::mt19937_64 rng(29);
  auto x = random_tensor<double>({1, 4, 4}, rng);
  auto pl = random_tensor<double>({1, 2, 2, 3}, rng);
  auto by_x = check_gradient(
      [&](const Tensor<double>& v) { return weighted_sum(prompt_cross_attention(v, pl, p), 1); }, x,
      1e-5, 1e-4);
  EXPECT_TRUE(by_x.passed) << by_x.max_rel_error;
  auto by_prompt = check_gradient(
      [&](const Tensor<double>& v) { return weighted_sum(prompt_cross_attention(x, v, p), 2); }, pl,
      1e-5, 1e-4);
  EXPECT_TRUE(by_prompt.passed) << by_prompt.max_rel_error;
  auto by_zero = check_gradient(
      [&](const Tensor<double>& v) {
        auto q = p;
        q.zero_w = v;
        return weighted_sum(prompt_cross_attention(x, pl, q), 3);
      },
      p.zero_w, 1e-5, 1e-4);
  EXPECT_TRUE(by_zero.passed) << by_zero.max_rel_error;
}

TEST(export_attention_map, uniform_weights_are_degenerate) {
  auto store = cross_store(8, 4, 6, 30, true);
  auto p = bind_cross_attention(store, "ca", 2);
  std::mt19937_64 rng(31);
  AttentionProbe probe;
  EXPECT_THROW(export_attention_map(probe, 0, {}, 3, 3), StateError);
  prompt_cross_attention(random_tensor<double>({1, 9, 8}, rng), random_tensor<double>({1, 4, 2, 2}, rng),
                         p, &probe);
  auto map = export_attention_map(probe, 0, std::vector<double>(4, 1.0), 3, 3);
  EXPECT_TRUE(map.degenerate);
  for (double v : map.values) EXPECT_EQ(v, 0.0);
  auto real = export_attention_map(probe, 0, {1.0, 0.0, 0.0, 0.0}, 3, 3);
  EXPECT_FALSE(real.degenerate);
  EXPECT_THROW(export_attention_map(probe, 0, {1.0, 0.0}, 3, 3), DimensionError);
}

TEST(export_attention_map, single_token_weights_follow_that_token) {
  AttentionProbe probe;
  probe.batch = 1;
  probe.heads = 1;
  probe.queries = 4;
  probe.keys = 3;
  // per-query weight on token 1: 0.1, 0.7, 0.4, 0.9
  probe.weights = {0.8, 0.1, 0.1, 0.2, 0.7, 0.1, 0.3, 0.4, 0.3, 0.05, 0.9, 0.05};
  probe.recorded = true;
  auto map = export_attention_map(probe, 0, {0.0, 1.0, 0.0}, 2, 2);
  const double w[4] = {0.1, 0.7, 0.4, 0.9};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(map.values[i], (w[i] - 0.1) / 0.8, 1e-12);
}

TEST(context_token_weights, area_average) {
  Image raster(4, 6, 1, 0.0);
  raster.at(0, 0) = 1.0;
  raster.at(1, 1) = 1.0;
  raster.at(3, 5) = 0.5;
  auto w = context_token_weights(raster, 2, 3);
  ASSERT_EQ(w.size(), 6u);
  EXPECT_DOUBLE_EQ(w[0], 0.5);
  EXPECT_DOUBLE_EQ(w[5], 0.125);
  EXPECT_DOUBLE_EQ(w[1], 0.0);
  EXPECT_THROW(context_token_weights(raster, 3, 3), ArgumentError);
}
