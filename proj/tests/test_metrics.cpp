#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "impro_rows.hpp"
#include "oracles.hpp"
#include "promptmatte/errors.hpp"
#include "promptmatte/metrics.hpp"

using namespace pmatte;
using namespace pmatte::testing;

TEST(pixel_metrics, closed_forms) {
  Image a(100, 100, 1, 1.0), b(100, 100, 1, 0.0);
  auto m = pixel_metrics(a, b);
  EXPECT_EQ(m.mse, 1.0);
  EXPECT_EQ(m.mad, 1.0);
  EXPECT_EQ(m.sad, 10.0);
  auto z = pixel_metrics(a, a);
  EXPECT_EQ(z.mse, 0.0);
  EXPECT_EQ(z.mad, 0.0);
  EXPECT_EQ(z.sad, 0.0);
}

TEST(pixel_metrics, match_loop_oracle_and_are_symmetric) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    auto p = random_matte(16, 16, rng, i % 2), g = random_matte(16, 16, rng, i % 3);
    double sq = 0, ab = 0;
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        const double d = p.at(y, x) - g.at(y, x);
        sq += d * d;
        ab += std::abs(d);
      }
    auto m = pixel_metrics(p, g);
    EXPECT_EQ(m.mse, sq / 256);
    EXPECT_EQ(m.mad, ab / 256);
    EXPECT_EQ(m.sad, ab / 1000);
    EXPECT_NEAR(m.sad, m.mad * 256 / 1000, 1e-15);
    auto r = pixel_metrics(g, p);
    EXPECT_EQ(r.mse, m.mse);
    EXPECT_EQ(r.mad, m.mad);
    EXPECT_EQ(r.sad, m.sad);
  }
}

TEST(metrics, extent_mismatch_is_rejected) {
  Image a(4, 4, 1), b(4, 5, 1), c(4, 4, 3);
  EXPECT_THROW(pixel_metrics(a, b), DimensionError);
  EXPECT_THROW(grad_metric(a, b), DimensionError);
  EXPECT_THROW(conn_metric(a, b), DimensionError);
  EXPECT_THROW(pixel_metrics(a, c), DimensionError);
  EXPECT_THROW(conn_metric(a, a, 0.3), ArgumentError);
  EXPECT_THROW(grad_metric(a, a, 0.0), ArgumentError);
}

TEST(grad_metric, vanishes_without_gradient_differences) {
  std::mt19937_64 rng(2);
  auto p = random_matte(16, 16, rng, true);
  EXPECT_EQ(grad_metric(p, p), 0.0);
  Image c1(16, 16, 1, 0.2), c2(16, 16, 1, 0.9);
  EXPECT_NEAR(grad_metric(c1, c2), 0.0, 1e-12);
}

TEST(grad_metric, matches_direct_convolution_oracle) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    auto p = random_matte(16, 16, rng, i % 2), g = random_matte(16, 16, rng, (i / 2) % 2);
    const double got = grad_metric(p, g);
    EXPECT_NEAR(got, grad_oracle(p, g), 1e-9);
    EXPECT_EQ(got, grad_metric(g, p));
  }
}

TEST(conn_metric, identical_mattes_score_zero) {
  std::mt19937_64 rng(4);
  auto p = random_matte(16, 16, rng, true);
  EXPECT_EQ(conn_metric(p, p), 0.0);
}

TEST(conn_metric, isolated_stray_pixel) {
  // 3x3 opaque square plus a stray opaque pixel in the prediction only. The
  // stray pixel leaves the joint region at the first threshold (level 0), so
  // phi_pred = 1 - 1 = 0 and phi_gt = 1: one unit, scaled by 1/1000.
  Image gt(8, 8, 1, 0.0);
  for (std::size_t y = 2; y < 5; ++y)
    for (std::size_t x = 2; x < 5; ++x) gt.at(y, x) = 1.0;
  Image pred = gt;
  pred.at(6, 6) = 1.0;
  EXPECT_DOUBLE_EQ(conn_metric(pred, gt), 0.001);
}

TEST(conn_metric, matches_flood_fill_oracle) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    auto p = random_matte(16, 16, rng, i % 2), g = random_matte(16, 16, rng, (i / 2) % 2);
    EXPECT_EQ(conn_metric(p, g), conn_oracle(p, g)) << "instance " << i;
  }
}

TEST(conn_metric, empty_joint_region) {
  Image p(8, 8, 1, 0.0), g(8, 8, 1, 0.05);
  g.at(3, 3) = 0.9;
  EXPECT_EQ(conn_metric(p, g), conn_oracle(p, g));
  EXPECT_NEAR(conn_metric(p, g), 0.9 / 1000, 1e-15);
}

TEST(impro, reproduces_every_reported_cell) {
  const auto& cases = pmatte::testing::impro_cases();
  ASSERT_EQ(cases.size(), 65u);
  for (const auto& c : cases) EXPECT_NEAR(impro(c.baseline, c.method), c.reported, 0.05) << c.label;
}

TEST(impro, headline_rows) {
  EXPECT_NEAR(impro({0.0302, 0.0388, 66.27, 46.63, 18.77}, {0.0109, 0.0189, 31.80, 26.84, 17.51}), 43.27, 0.05);
  EXPECT_NEAR(impro({0.0155, 0.0285, 48.28, 20.78, 20.26}, {0.0027, 0.0087, 14.53, 16.94, 10.95}), 57.28, 0.05);
  EXPECT_NEAR(impro({0.0169, 44.23, 0.0115, 26.54, 0.0098, 28.55, 0.0054, 14.63},
                    {0.0139, 40.18, 0.0107, 25.14, 0.0077, 24.26, 0.0052, 14.29}),
              10.20, 0.05);
}

TEST(impro, identity_and_errors) {
  const std::vector<double> row{0.1, 2.0, 30.0};
  EXPECT_EQ(impro(row, row), 0.0);
  EXPECT_THROW(impro({0.1, 0.0}, {0.1, 0.1}), ArgumentError);
  EXPECT_THROW(impro({0.1, 0.2}, {0.1}), ArgumentError);
  EXPECT_THROW(impro({}, {}), ArgumentError);
}

TEST(mean_row, uniform_average) {
  std::vector<MetricRow> rows{{1, 2, 3, 4, 5}, {3, 4, 5, 6, 7}};
  EXPECT_EQ(mean_row(rows), (MetricRow{2, 3, 4, 5, 6}));
  EXPECT_EQ(mean_row({}), MetricRow{});
}
