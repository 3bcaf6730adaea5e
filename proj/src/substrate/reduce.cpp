#include <algorithm>
#include <cmath>
#include <limits>

#include "balr/ops.hpp"
#include "detail.hpp"

namespace balr {
namespace {

/// Reduced shape with kept unit axes, plus the user-visible output shape.
struct ReducePlan {
  Shape kept;
  Shape out;
  std::int64_t count = 1;  // elements folded into each output
};

ReducePlan plan_reduce(const Shape& in, const std::vector<std::int64_t>& axes, bool keepdim) {
  ReducePlan p;
  p.kept = in;
  std::vector<bool> reduced(in.size(), false);
  for (auto axis : axes) {
    const auto a = static_cast<std::size_t>(detail::normalize_axis(axis, static_cast<std::int64_t>(in.size())));
    if (reduced[a]) throw DimensionError("reduction: repeated axis", static_cast<int>(a));
    reduced[a] = true;
    p.count *= in[a];
    p.kept[a] = 1;
  }
  for (std::size_t i = 0; i < in.size(); ++i)
    if (keepdim || !reduced[i]) p.out.push_back(p.kept[i]);
  return p;
}

Tensor reduce_sum(const Tensor& a, const std::vector<std::int64_t>& axes, bool keepdim, double factor,
                  const char* name) {
  const auto plan = plan_reduce(a.shape(), axes, keepdim);
  Buffer out(static_cast<std::size_t>(shape_numel(plan.kept)), 0.0);
  const double* src = a.data().data();
  auto so = detail::broadcast_strides(plan.kept, a.shape().size());
  detail::Strides zero(a.shape().size(), 0);
  detail::walk2(a.shape(), so, zero, [&](std::int64_t i, std::int64_t o, std::int64_t) { out[o] += src[i]; });
  if (factor != 1.0)
    for (auto& v : out) v *= factor;
  instrument::add_flops(static_cast<std::uint64_t>(a.numel()));
  Shape in_shape = a.shape();
  Shape kept = plan.kept;
  return autograd::make_output(
      plan.out, std::move(out), {a},
      [in_shape, kept, factor](Buffer g, const std::vector<bool>&) {
        Buffer gi(static_cast<std::size_t>(shape_numel(in_shape)));
        auto so = detail::broadcast_strides(kept, in_shape.size());
        detail::Strides zero(in_shape.size(), 0);
        detail::walk2(in_shape, so, zero, [&](std::int64_t i, std::int64_t o, std::int64_t) { gi[i] = g[o] * factor; });
        return std::vector<Buffer>{std::move(gi)};
      },
      name);
}

std::vector<std::int64_t> all_axes(const Tensor& a) {
  std::vector<std::int64_t> axes(static_cast<std::size_t>(a.rank()));
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<std::int64_t>(i);
  return axes;
}

}  // namespace

Tensor sum(const Tensor& a) { return reduce_sum(a, all_axes(a), false, 1.0, "sum"); }

Tensor mean(const Tensor& a) { return reduce_sum(a, all_axes(a), false, 1.0 / static_cast<double>(a.numel()), "mean"); }

Tensor sum(const Tensor& a, const std::vector<std::int64_t>& axes, bool keepdim) {
  return reduce_sum(a, axes, keepdim, 1.0, "sum");
}

Tensor mean(const Tensor& a, const std::vector<std::int64_t>& axes, bool keepdim) {
  const auto plan = plan_reduce(a.shape(), axes, keepdim);
  return reduce_sum(a, axes, keepdim, 1.0 / static_cast<double>(plan.count), "mean");
}

Tensor amax(const Tensor& a, const std::vector<std::int64_t>& axes, bool keepdim) {
  const auto plan = plan_reduce(a.shape(), axes, keepdim);
  const auto nout = static_cast<std::size_t>(shape_numel(plan.kept));
  Buffer out(nout, -std::numeric_limits<double>::infinity());
  std::vector<std::int64_t> arg(nout, -1);
  const double* src = a.data().data();
  auto so = detail::broadcast_strides(plan.kept, a.shape().size());
  detail::Strides zero(a.shape().size(), 0);
  detail::walk2(a.shape(), so, zero, [&](std::int64_t i, std::int64_t o, std::int64_t) {
    if (src[i] > out[o]) {
      out[o] = src[i];
      arg[o] = i;
    }
  });
  instrument::add_flops(static_cast<std::uint64_t>(a.numel()));
  const auto nin = static_cast<std::size_t>(a.numel());
  return autograd::make_output(
      plan.out, std::move(out), {a},
      [arg = std::move(arg), nin](Buffer g, const std::vector<bool>&) {
        Buffer gi(nin, 0.0);
        for (std::size_t o = 0; o < arg.size(); ++o) gi[static_cast<std::size_t>(arg[o])] += g[o];
        return std::vector<Buffer>{std::move(gi)};
      },
      "amax");
}

Tensor softmax(const Tensor& a) {
  if (a.rank() < 1) throw DimensionError("softmax: needs rank >= 1", -1);
  const std::int64_t cols = a.size(-1);
  const std::int64_t rows = a.numel() / cols;
  const double* src = a.data().data();
  Buffer out(static_cast<std::size_t>(a.numel()));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = src + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double s = 0;
    for (std::int64_t c = 0; c < cols; ++c) s += (y[c] = std::exp(x[c] - mx));
    const double inv = 1.0 / s;
    for (std::int64_t c = 0; c < cols; ++c) y[c] *= inv;
  }
  instrument::add_flops(static_cast<std::uint64_t>(4 * a.numel()));
  auto result = autograd::make_output(a.shape(), std::move(out), {a}, nullptr, "softmax");
  if (result.impl()->grad_fn) {
    auto y = result.impl()->data;
    result.impl()->grad_fn->backward = [y, rows, cols](Buffer g, const std::vector<bool>&) {
      // dx = y * (g - <g, y>), written over g.
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* yr = y->data() + r * cols;
        double* gr = g.data() + r * cols;
        double d = 0;
        for (std::int64_t c = 0; c < cols; ++c) d += gr[c] * yr[c];
        for (std::int64_t c = 0; c < cols; ++c) gr[c] = yr[c] * (gr[c] - d);
      }
      return std::vector<Buffer>{std::move(g)};
    };
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::int64_t d = x.size(-1);
  if (gamma.numel() != d) throw DimensionError("layer_norm: gamma size " + std::to_string(gamma.numel()) + " vs " + std::to_string(d), -1);
  if (beta.numel() != d) throw DimensionError("layer_norm: beta size " + std::to_string(beta.numel()) + " vs " + std::to_string(d), -1);
  const std::int64_t rows = x.numel() / d;
  const double* src = x.data().data();
  const double* gm = gamma.data().data();
  const double* bt = beta.data().data();
  Buffer out(static_cast<std::size_t>(x.numel()));
  Buffer xhat(static_cast<std::size_t>(x.numel()));
  Buffer inv_std(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = src + r * d;
    double mu = 0;
    for (std::int64_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::int64_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (std::int64_t c = 0; c < d; ++c) {
      const double h = (xr[c] - mu) * is;
      xhat[static_cast<std::size_t>(r * d + c)] = h;
      out[static_cast<std::size_t>(r * d + c)] = h * gm[c] + bt[c];
    }
  }
  instrument::add_flops(static_cast<std::uint64_t>(8 * x.numel()));
  auto saved_hat = std::make_shared<Buffer>(std::move(xhat));
  auto saved_is = std::make_shared<Buffer>(std::move(inv_std));
  auto gdata = gamma.impl()->data;
  return autograd::make_output(
      x.shape(), std::move(out), {x, gamma, beta},
      [saved_hat, saved_is, gdata, rows, d](Buffer g, const std::vector<bool>& needs) {
        std::vector<Buffer> grads(3);
        const Buffer& h = *saved_hat;
        if (needs[1]) {
          Buffer gg(static_cast<std::size_t>(d), 0.0);
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * h[r * d + c];
          grads[1] = std::move(gg);
        }
        if (needs[2]) {
          Buffer gb(static_cast<std::size_t>(d), 0.0);
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
          grads[2] = std::move(gb);
        }
        if (needs[0]) {
          Buffer gx(static_cast<std::size_t>(rows * d));
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::int64_t r = 0; r < rows; ++r) {
            double s1 = 0, s2 = 0;
            for (std::int64_t c = 0; c < d; ++c) {
              const double gh = g[r * d + c] * (*gdata)[c];
              s1 += gh;
              s2 += gh * h[r * d + c];
            }
            const double is = (*saved_is)[r];
            for (std::int64_t c = 0; c < d; ++c) {
              const double gh = g[r * d + c] * (*gdata)[c];
              gx[r * d + c] = is * (gh - inv_d * s1 - h[r * d + c] * inv_d * s2);
            }
          }
          grads[0] = std::move(gx);
        }
        return grads;
      },
      "layer_norm");
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool: expected [N,C,H,W], got " + shape_str(x.shape()), -1);
  return mean(x, {2, 3}, true);
}

Tensor global_max_pool(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("global_max_pool: expected [N,C,H,W], got " + shape_str(x.shape()), -1);
  return amax(x, {2, 3}, true);
}

}  // namespace balr
