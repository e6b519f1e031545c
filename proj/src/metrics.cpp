#include "promptmatte/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "promptmatte/errors.hpp"

namespace pmatte {

namespace {

void check_pair(const Image& pred, const Image& gt, const char* what) {
  if (pred.channels != 1 || gt.channels != 1) {
    throw DimensionError(std::string(what) + ": mattes must have one channel");
  }
  if (pred.height != gt.height || pred.width != gt.width) {
    throw DimensionError(std::string(what) + ": extents differ (" + std::to_string(pred.height) + "x" +
                         std::to_string(pred.width) + " vs " + std::to_string(gt.height) + "x" +
                         std::to_string(gt.width) + ")");
  }
}

// Correlates each row (axis 1) or column (axis 0) with `k`, replicating the border.
std::vector<double> filter_1d(const std::vector<double>& in, std::size_t h, std::size_t w,
                              const std::vector<double>& k, int axis) {
  const long half = static_cast<long>(k.size() / 2);
  std::vector<double> out(in.size(), 0.0);
  for (long y = 0; y < static_cast<long>(h); ++y)
    for (long x = 0; x < static_cast<long>(w); ++x) {
      double acc = 0.0;
      for (long t = -half; t <= half; ++t) {
        long yy = y, xx = x;
        if (axis == 0) {
          yy = std::clamp(y + t, 0L, static_cast<long>(h) - 1);
        } else {
          xx = std::clamp(x + t, 0L, static_cast<long>(w) - 1);
        }
        acc += k[t + half] * in[yy * w + xx];
      }
      out[y * w + x] = acc;
    }
  return out;
}

std::vector<double> gradient_magnitude(const Image& a, double sigma) {
  const long half = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> g, dg;
  for (long t = -half; t <= half; ++t) {
    const double e = std::exp(-0.5 * t * t / (sigma * sigma));
    g.push_back(e);
    dg.push_back(-t * e / (sigma * sigma));
  }
  // The 2D kernel g(y) dg(x) has L2 norm |g| |dg|, so each factor is
  // normalized on its own.
  auto unit = [](std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
  };
  unit(g);
  unit(dg);
  const auto gx = filter_1d(filter_1d(a.values, a.height, a.width, dg, 1), a.height, a.width, g, 0);
  const auto gy = filter_1d(filter_1d(a.values, a.height, a.width, g, 1), a.height, a.width, dg, 0);
  std::vector<double> mag(gx.size());
  for (std::size_t i = 0; i < mag.size(); ++i) mag[i] = std::sqrt(gx[i] * gx[i] + gy[i] * gy[i]);
  return mag;
}

// Marks the largest 4-connected component of `on`; ties go to the component
// whose first pixel comes first in row-major order.
std::vector<std::uint8_t> largest_component(const std::vector<std::uint8_t>& on, std::size_t h,
                                            std::size_t w) {
  std::vector<int> label(on.size(), -1);
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < on.size(); ++start) {
    if (!on[start] || label[start] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    std::size_t size = 0;
    stack.push_back(start);
    label[start] = id;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++size;
      const std::size_t y = i / w, x = i % w;
      auto visit = [&](std::size_t j) {
        if (on[j] && label[j] < 0) {
          label[j] = id;
          stack.push_back(j);
        }
      };
      if (y > 0) visit(i - w);
      if (y + 1 < h) visit(i + w);
      if (x > 0) visit(i - 1);
      if (x + 1 < w) visit(i + 1);
    }
    sizes.push_back(size);
  }
  std::vector<std::uint8_t> out(on.size(), 0);
  if (sizes.empty()) return out;
  const int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  for (std::size_t i = 0; i < on.size(); ++i) out[i] = label[i] == best;
  return out;
}

}  // namespace

PixelMetrics pixel_metrics(const Image& pred, const Image& gt) {
  check_pair(pred, gt, "pixel_metrics");
  PixelMetrics m;
  const std::size_t n = pred.values.size();
  if (n == 0) return m;
  double sq = 0.0, ab = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pred.values[i] - gt.values[i];
    sq += d * d;
    ab += std::abs(d);
  }
  m.mse = sq / n;
  m.mad = ab / n;
  m.sad = ab / 1000.0;
  return m;
}

double grad_metric(const Image& pred, const Image& gt, double sigma) {
  check_pair(pred, gt, "grad_metric");
  if (!(sigma > 0.0)) throw ArgumentError("grad_metric: sigma must be positive");
  const auto mp = gradient_magnitude(pred, sigma);
  const auto mg = gradient_magnitude(gt, sigma);
  double acc = 0.0;
  for (std::size_t i = 0; i < mp.size(); ++i) acc += std::abs(mp[i] - mg[i]);
  return acc / 1000.0;
}

double conn_metric(const Image& pred, const Image& gt, double step) {
  check_pair(pred, gt, "conn_metric");
  if (!(step > 0.0 && step <= 0.5)) throw ArgumentError("conn_metric: step must lie in (0, 0.5]");
  const long levels = std::lround(1.0 / step);
  if (std::abs(levels * step - 1.0) > 1e-9) {
    throw ArgumentError("conn_metric: step must divide 1 into at least two levels");
  }
  const std::size_t n = pred.values.size();
  std::vector<double> level(n, -1.0);
  std::vector<std::uint8_t> on(n);
  for (long k = 1; k < levels; ++k) {
    const double t = static_cast<double>(k) / levels;
    for (std::size_t i = 0; i < n; ++i) on[i] = pred.values[i] >= t && gt.values[i] >= t;
    const auto omega = largest_component(on, pred.height, pred.width);
    const double prev = static_cast<double>(k - 1) / levels;
    for (std::size_t i = 0; i < n; ++i)
      if (level[i] < 0.0 && !omega[i]) level[i] = prev;
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double l = level[i] < 0.0 ? 1.0 : level[i];
    const double dp = pred.values[i] - l;
    const double dg = gt.values[i] - l;
    const double phi_p = 1.0 - (dp >= 0.15 ? dp : 0.0);
    const double phi_g = 1.0 - (dg >= 0.15 ? dg : 0.0);
    acc += std::abs(phi_p - phi_g);
  }
  return acc / 1000.0;
}

MetricRow compute_metrics(const Image& pred, const Image& gt, const MetricConfig& config) {
  const auto p = pixel_metrics(pred, gt);
  return {p.mse, p.mad, p.sad, grad_metric(pred, gt, config.grad_sigma), conn_metric(pred, gt, config.conn_step)};
}

MetricRow mean_row(const std::vector<MetricRow>& rows) {
  MetricRow m;
  if (rows.empty()) return m;
  for (const auto& r : rows) {
    m.mse += r.mse;
    m.mad += r.mad;
    m.sad += r.sad;
    m.grad += r.grad;
    m.conn += r.conn;
  }
  const double n = static_cast<double>(rows.size());
  return {m.mse / n, m.mad / n, m.sad / n, m.grad / n, m.conn / n};
}

double impro(const std::vector<double>& baseline, const std::vector<double>& method) {
  if (baseline.size() != method.size()) {
    throw ArgumentError("impro: baseline has " + std::to_string(baseline.size()) + " values, method has " +
                        std::to_string(method.size()));
  }
  if (baseline.empty()) throw ArgumentError("impro: empty rows");
  double acc = 0.0;
  for (std::size_t i = 0; i < baseline.size(); ++i) {
    if (!(baseline[i] > 0.0)) {
      throw ArgumentError("impro: baseline entry " + std::to_string(i) + " must be positive");
    }
    acc += (baseline[i] - method[i]) / baseline[i];
  }
  return 100.0 * acc / static_cast<double>(baseline.size());
}

}  // namespace pmatte
