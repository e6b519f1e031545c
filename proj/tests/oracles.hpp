#pragma once

// Brute-force reference implementations shared by the unit tests and the
// acceptance runner.

#include <algorithm>
#include <cmath>
#include <deque>
#include <random>
#include <vector>

#include "promptmatte/image.hpp"

namespace pmatte::testing {

// Direct evaluation of the encoding in pow form rather than exp/log.
inline double encode_oracle(double value, std::size_t dim, std::size_t j) {
  const std::size_t half = dim / 2;
  const std::size_t i = j % half;
  const double freq = half == 1 ? 1.0 : std::pow(10000.0, -static_cast<double>(i) / (half - 1));
  return j < half ? std::sin(value * freq) : std::cos(value * freq);
}

inline Image random_matte(std::size_t h, std::size_t w, std::mt19937_64& rng, bool smooth) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image a(h, w, 1);
  const double fx = 0.2 + u(rng), fy = 0.2 + u(rng), ph = 6.0 * u(rng);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      a.at(y, x) = smooth ? std::clamp(0.5 + 0.7 * std::sin(fx * x + ph) * std::cos(fy * y) + 0.1 * (u(rng) - 0.5), 0.0, 1.0)
                          : u(rng);
    }
  return a;
}

// Direct 2D correlation with the outer-product kernel normalized as a whole.
inline std::vector<double> magnitude_oracle(const Image& a, double sigma) {
  const int half = static_cast<int>(std::ceil(3 * sigma));
  const int k = 2 * half + 1;
  std::vector<double> kx(k * k), ky(k * k);
  double nx = 0, ny = 0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      const double v = i - half, u = j - half;
      const double gv = std::exp(-v * v / (2 * sigma * sigma));
      const double gu = std::exp(-u * u / (2 * sigma * sigma));
      kx[i * k + j] = gv * (-u / (sigma * sigma)) * gu;
      ky[i * k + j] = gu * (-v / (sigma * sigma)) * gv;
      nx += kx[i * k + j] * kx[i * k + j];
      ny += ky[i * k + j] * ky[i * k + j];
    }
  std::vector<double> mag(a.pixels());
  const int h = static_cast<int>(a.height), w = static_cast<int>(a.width);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double gx = 0, gy = 0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          const int yy = std::clamp(y + i - half, 0, h - 1);
          const int xx = std::clamp(x + j - half, 0, w - 1);
          gx += kx[i * k + j] * a.at(yy, xx);
          gy += ky[i * k + j] * a.at(yy, xx);
        }
      gx /= std::sqrt(nx);
      gy /= std::sqrt(ny);
      mag[y * w + x] = std::hypot(gx, gy);
    }
  return mag;
}

inline double grad_oracle(const Image& p, const Image& g) {
  auto mp = magnitude_oracle(p, 1.4), mg = magnitude_oracle(g, 1.4);
  double s = 0;
  for (std::size_t i = 0; i < mp.size(); ++i) s += std::abs(mp[i] - mg[i]);
  return s / 1000;
}

// Breadth-first flood fill; component ids follow the row-major order of
// their first pixel, so ties resolve to the lowest id.
inline std::vector<bool> largest_region_oracle(const std::vector<bool>& on, int h, int w) {
  std::vector<int> id(on.size(), -1);
  std::vector<int> size;
  for (int s = 0; s < h * w; ++s) {
    if (!on[s] || id[s] != -1) continue;
    const int c = static_cast<int>(size.size());
    size.push_back(0);
    std::deque<int> q{s};
    id[s] = c;
    while (!q.empty()) {
      const int p = q.front();
      q.pop_front();
      ++size[c];
      const int y = p / w, x = p % w;
      const int ny[4] = {y - 1, y + 1, y, y}, nx[4] = {x, x, x - 1, x + 1};
      for (int d = 0; d < 4; ++d) {
        if (ny[d] < 0 || ny[d] >= h || nx[d] < 0 || nx[d] >= w) continue;
        const int n = ny[d] * w + nx[d];
        if (on[n] && id[n] == -1) {
          id[n] = c;
          q.push_back(n);
        }
      }
    }
  }
  int best = -1;
  for (int c = 0; c < static_cast<int>(size.size()); ++c)
    if (best < 0 || size[c] > size[best]) best = c;
  std::vector<bool> out(on.size(), false);
  for (std::size_t i = 0; i < on.size(); ++i) out[i] = best >= 0 && id[i] == best;
  return out;
}

inline double conn_oracle(const Image& p, const Image& g) {
  const int h = static_cast<int>(p.height), w = static_cast<int>(p.width);
  std::vector<double> level(p.pixels(), 1.0);
  std::vector<bool> assigned(p.pixels(), false);
  for (int k = 1; k <= 9; ++k) {
    const double t = k / 10.0;
    std::vector<bool> on(p.pixels());
    for (std::size_t i = 0; i < on.size(); ++i) on[i] = p.values[i] >= t && g.values[i] >= t;
    const auto region = largest_region_oracle(on, h, w);
    for (std::size_t i = 0; i < on.size(); ++i)
      if (!assigned[i] && !region[i]) {
        assigned[i] = true;
        level[i] = (k - 1) / 10.0;
      }
  }
  double s = 0;
  for (std::size_t i = 0; i < level.size(); ++i) {
    const double dp = p.values[i] - level[i], dg = g.values[i] - level[i];
    s += std::abs((1 - (dp >= 0.15 ? dp : 0.0)) - (1 - (dg >= 0.15 ? dg : 0.0)));
  }
  return s / 1000;
}

}  // namespace pmatte::testing
