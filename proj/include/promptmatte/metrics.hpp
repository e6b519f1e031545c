#pragma once

// Matting error metrics (MSE, MAD, SAD, Grad, Conn) and the average relative
// improvement between two metric rows.

#include <array>
#include <vector>

#include "promptmatte/image.hpp"

namespace pmatte {

struct MetricRow {
  double mse = 0.0;
  double mad = 0.0;
  double sad = 0.0;
  double grad = 0.0;
  double conn = 0.0;

  std::array<double, 5> values() const { return {mse, mad, sad, grad, conn}; }
  bool operator==(const MetricRow&) const = default;
};

struct MetricConfig {
  double grad_sigma = 1.4;
  double conn_step = 0.1;  // thresholds k * step for 0 < k * step < 1
};

struct PixelMetrics {
  double mse = 0.0;
  double mad = 0.0;
  double sad = 0.0;  // sum |pred - gt| / 1000
};

// All metrics take single-channel mattes of equal extents and throw
// DimensionError otherwise.
PixelMetrics pixel_metrics(const Image& pred, const Image& gt);

// First-order Gaussian derivative filters (half width ceil(3 sigma), unit L2
// norm, replicated border); sum of absolute gradient-magnitude differences
// divided by 1000.
double grad_metric(const Image& pred, const Image& gt, double sigma = 1.4);

// Per-threshold largest 4-connected component of (pred >= t) & (gt >= t);
// each pixel's level is the last threshold before it leaves that component
// (1 if it never does). phi = 1 - d * (d >= 0.15) with d = alpha - level;
// result sum |phi_pred - phi_gt| / 1000.
double conn_metric(const Image& pred, const Image& gt, double step = 0.1);

MetricRow compute_metrics(const Image& pred, const Image& gt, const MetricConfig& config = {});

// Uniform average; an empty list gives a zero row.
MetricRow mean_row(const std::vector<MetricRow>& rows);

// 100 * mean((baseline_i - method_i) / baseline_i). Lengths must agree and
// every baseline entry must be positive (ArgumentError otherwise).
double impro(const std::vector<double>& baseline, const std::vector<double>& method);

}  // namespace pmatte
