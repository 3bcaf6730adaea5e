#include "balr/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "balr/errors.hpp"

namespace balr {
namespace {

void check_eps(double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw ConfigError("grad_check: eps must lie in (0, 1e-2]");
}

double evaluate(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  Tensor y = f();
  if (y.numel() != 1) throw DimensionError("grad_check: function must return a scalar", -1);
  const double v = y.item();
  if (!std::isfinite(v)) throw NumericError("grad_check: f(x) is not finite");
  return v;
}

double rel_error(double analytic, double fd) { return std::abs(analytic - fd) / (std::abs(analytic) + std::abs(fd) + 1e-12); }

}  // namespace

double grad_check(const ScalarFn& f, const Tensor& x, double eps) {
  Tensor leaf = x.clone();
  leaf.set_requires_grad(true);
  return grad_check_params([&] { return f(leaf); }, {leaf}, eps).max_rel_error;
}

GradCheckResult grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps,
                                  std::int64_t max_coords_per_tensor, double relative_floor) {
  check_eps(eps);
  if (!(relative_floor >= 0.0)) throw ConfigError("grad_check: relative_floor must be non-negative");
  for (auto& p : params) {
    if (!p.is_leaf()) throw Error("grad_check_params: parameters must be leaves");
    p.zero_grad();
  }
  {
    Tensor y = f();
    if (y.numel() != 1) throw DimensionError("grad_check: function must return a scalar", -1);
    if (!std::isfinite(y.item())) throw NumericError("grad_check: f(x) is not finite");
    y.backward();
  }

  GradCheckResult result;
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    analytic.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    if (p.has_grad()) std::copy(p.grad_data().begin(), p.grad_data().end(), analytic.back().begin());
    for (double g : analytic.back()) result.grad_scale = std::max(result.grad_scale, std::abs(g));
    p.zero_grad();
  }
  const double floor = 1e-12 + relative_floor * result.grad_scale;

  std::int64_t offset = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    const auto n = p.numel();
    const std::int64_t stride = (max_coords_per_tensor > 0 && n > max_coords_per_tensor) ? n / max_coords_per_tensor : 1;
    auto data = p.mutable_data();
    for (std::int64_t i = 0; i < n; i += stride) {
      const auto u = static_cast<std::size_t>(i);
      const double original = data[u];
      data[u] = original + eps;
      const double up = evaluate(f);
      data[u] = original - eps;
      const double down = evaluate(f);
      data[u] = original;
      const double fd = (up - down) / (2.0 * eps);
      const double a = analytic[k][u];
      const double diff = std::abs(a - fd);
      const double err = diff / (std::abs(a) + std::abs(fd) + floor);
      result.max_abs_error = std::max(result.max_abs_error, diff);
      result.max_pointwise_rel_error = std::max(result.max_pointwise_rel_error, rel_error(a, fd));
      ++result.coordinates;
      if (err > result.max_rel_error || result.worst_index < 0) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        if (err >= result.max_rel_error) result.worst_index = offset + i;
      }
    }
    offset += n;
  }
  return result;
}

}  // namespace balr
