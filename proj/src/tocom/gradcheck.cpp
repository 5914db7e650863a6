#include "tocom/gradcheck.hpp"

#include <cmath>

namespace tocom::ad {

template <class T>
GradCheckResult finite_difference_check(const std::function<Var<T>(const std::vector<Var<T>>&)>& f,
                                        const std::vector<Tensor<T>>& points, double eps) {
  if (!(eps > 0)) throw ValidationError("finite_difference_check: step must be positive");
  std::vector<Var<T>> params;
  for (const auto& p : points) params.push_back(Var<T>::parameter(p));
  Var<T> loss = f(params);
  backward(loss);

  auto evaluate = [&](const std::vector<Tensor<T>>& at) {
    std::vector<Var<T>> consts;
    for (const auto& p : at) consts.push_back(Var<T>::constant(p));
    const T v = f(consts).value().item();
    if (!std::isfinite(v)) throw ValidationError("finite_difference_check: non-finite evaluation");
    return static_cast<double>(v);
  };

  GradCheckResult result;
  std::vector<Tensor<T>> work = points;
  for (std::size_t t = 0; t < points.size(); ++t) {
    const bool has = params[t].has_grad();
    for (std::size_t i = 0; i < points[t].numel(); ++i) {
      const double analytic = has ? static_cast<double>(params[t].grad()[i]) : 0.0;
      const T orig = work[t][i];
      work[t][i] = orig + static_cast<T>(eps);
      const double plus = evaluate(work);
      work[t][i] = orig - static_cast<T>(eps);
      const double minus = evaluate(work);
      work[t][i] = orig;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double err = std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
      ++result.coordinates;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_input = t;
        result.worst_index = i;
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

template <class T>
double finite_difference_check(const std::function<Var<T>(const Var<T>&)>& f, const Tensor<T>& point, double eps) {
  std::function<Var<T>(const std::vector<Var<T>>&)> wrapped = [&](const std::vector<Var<T>>& v) { return f(v[0]); };
  return finite_difference_check<T>(wrapped, std::vector<Tensor<T>>{point}, eps).max_relative_error;
}

template GradCheckResult finite_difference_check<float>(const std::function<Var<float>(const std::vector<Var<float>>&)>&,
                                                        const std::vector<Tensor<float>>&, double);
template GradCheckResult finite_difference_check<double>(
    const std::function<Var<double>(const std::vector<Var<double>>&)>&, const std::vector<Tensor<double>>&, double);
template double finite_difference_check<float>(const std::function<Var<float>(const Var<float>&)>&,
                                               const Tensor<float>&, double);
template double finite_difference_check<double>(const std::function<Var<double>(const Var<double>&)>&,
                                                const Tensor<double>&, double);

}  // namespace tocom::ad
