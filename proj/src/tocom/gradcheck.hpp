#pragma once

#include <functional>
#include <vector>

#include "tocom/autodiff.hpp"

namespace tocom::ad {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients of a scalar function against central
// differences (f(x+eps) - f(x-eps)) / 2eps. The error of one coordinate is
// |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
template <class T>
GradCheckResult finite_difference_check(const std::function<Var<T>(const std::vector<Var<T>>&)>& f,
                                        const std::vector<Tensor<T>>& points, double eps);

template <class T>
double finite_difference_check(const std::function<Var<T>(const Var<T>&)>& f, const Tensor<T>& point, double eps);

}  // namespace tocom::ad
