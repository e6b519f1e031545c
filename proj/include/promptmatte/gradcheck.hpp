#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "promptmatte/tensor.hpp"

namespace pmatte {

struct GradientReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> rel_error;
  double max_rel_error = 0.0;
  bool passed = false;
};

// |a - n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
// derivative is ~0 from reporting pure rounding noise as relative error.
double relative_error(double analytic, double numeric, double floor = 1e-6);

// Compares backward() of the scalar f(x) against central differences
// (f(x + eps) - f(x - eps)) / 2 eps on every coordinate of x.
GradientReport check_gradient(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                              const Tensor<double>& x, double eps, double tol);

// Same comparison for a leaf that f reads implicitly (e.g. a model
// parameter), restricted to `coords`. The leaf is restored afterwards.
GradientReport check_gradient_at(const std::function<Tensor<double>()>& f, Tensor<double> leaf,
                                 const std::vector<std::size_t>& coords, double eps, double tol);

}  // namespace pmatte
