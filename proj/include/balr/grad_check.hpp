#pragma once

#include <functional>
#include <vector>

#include "balr/tensor.hpp"

namespace balr {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::int64_t worst_index = -1;  // flat index into the concatenated inputs
  std::int64_t coordinates = 0;
  double max_abs_error = 0.0;
  /// Per-coordinate error with the bare 1e-12 floor, whatever relative_floor is.
  double max_pointwise_rel_error = 0.0;
  /// Largest analytic gradient magnitude over all inputs.
  double grad_scale = 0.0;
};

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Compares reverse-mode gradients of a scalar function with central
/// differences. Per coordinate the error is
///   |analytic - fd| / (|analytic| + |fd| + 1e-12)
/// and the maximum is returned. eps must lie in (0, 1e-2].
/// Throws NumericError if f(x) is not finite.
double grad_check(const ScalarFn& f, const Tensor& x, double eps);

/// Same check against leaf tensors captured by `f` (e.g. model parameters).
/// Each leaf's data is perturbed in place and restored. `max_coords_per_tensor`
/// limits the probed coordinates (evenly strided) for large tensors; 0 = all.
/// With relative_floor > 0 the denominator becomes
///   |analytic| + |fd| + 1e-12 + relative_floor * grad_scale
/// so coordinates whose gradient sits below central-difference round-off
/// (saturated gates, activation tails) are judged against the overall
/// gradient scale instead of their own near-zero magnitude.
GradCheckResult grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps,
                                  std::int64_t max_coords_per_tensor = 0, double relative_floor = 0.0);

}  // namespace balr
