#include "promptmatte/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "promptmatte/errors.hpp"

namespace pmatte {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradientReport check_gradient_at(const std::function<Tensor<double>()>& f, Tensor<double> leaf,
                                 const std::vector<std::size_t>& coords, double eps, double tol) {
  if (!(eps > 0.0)) throw ArgumentError("check_gradient: eps must be positive");
  if (!leaf.is_leaf()) throw ArgumentError("check_gradient: target must be a leaf tensor");
  for (std::size_t c : coords) {
    if (c >= leaf.numel()) throw ArgumentError("check_gradient: coordinate out of range");
  }

  const bool had_flag = leaf.requires_grad();
  leaf.set_requires_grad(true);
  leaf.zero_grad();
  Tensor<double> root = f();
  root.backward();

  GradientReport report;
  std::vector<double> full_grad(leaf.numel(), 0.0);
  if (leaf.has_grad()) {
    auto g = leaf.grad();
    std::copy(g.begin(), g.end(), full_grad.begin());
  }
  leaf.zero_grad();
  leaf.set_requires_grad(had_flag);

  NoGradGuard no_grad;
  auto values = leaf.data_mut();
  for (std::size_t c : coords) {
    const double saved = values[c];
    values[c] = saved + eps;
    const double up = f().item();
    values[c] = saved - eps;
    const double down = f().item();
    values[c] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double analytic = full_grad[c];
    report.analytic.push_back(analytic);
    report.numeric.push_back(numeric);
    report.rel_error.push_back(relative_error(analytic, numeric));
  }
  report.max_rel_error =
      report.rel_error.empty() ? 0.0
                               : *std::max_element(report.rel_error.begin(), report.rel_error.end());
  report.passed = report.max_rel_error < tol;
  return report;
}

GradientReport check_gradient(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                              const Tensor<double>& x, double eps, double tol) {
  Tensor<double> leaf = x.detach();
  std::vector<std::size_t> coords(leaf.numel());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  return check_gradient_at([&] { return f(leaf); }, leaf, coords, eps, tol);
}

}  // namespace pmatte
