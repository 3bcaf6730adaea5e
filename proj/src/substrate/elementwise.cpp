#include <algorithm>
#include <cmath>

#include "balr/ops.hpp"
#include "detail.hpp"

namespace balr {
namespace {

using detail::broadcast_shape;
using detail::broadcast_strides;
using detail::reduce_to;
using detail::walk2;

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const Shape out = broadcast_shape(a.shape(), b.shape(), name);
  const auto n = static_cast<std::size_t>(shape_numel(out));
  Buffer r(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  auto apply = [op](double x, double y) {
    switch (op) {
      case BinOp::Add: return x + y;
      case BinOp::Sub: return x - y;
      case BinOp::Mul: return x * y;
      case BinOp::Div: return x / y;
    }
    return 0.0;
  };
  const bool same = a.shape() == out && b.shape() == out;
  if (same) {
    for (std::size_t i = 0; i < n; ++i) r[i] = apply(pa[i], pb[i]);
  } else {
    auto sa = broadcast_strides(a.shape(), out.size());
    auto sb = broadcast_strides(b.shape(), out.size());
    walk2(out, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) { r[o] = apply(pa[ia], pb[ib]); });
  }
  instrument::add_flops(n);

  const bool product = op == BinOp::Mul || op == BinOp::Div;
  std::shared_ptr<Buffer> da = product && b.requires_grad() ? a.impl()->data : nullptr;
  std::shared_ptr<Buffer> db = product ? b.impl()->data : nullptr;
  Shape sha = a.shape();
  Shape shb = b.shape();
  return autograd::make_output(
      out, std::move(r), {a, b},
      [=](Buffer g, const std::vector<bool>& needs) {
        std::vector<Buffer> grads(2);
        const auto sa = broadcast_strides(sha, out.size());
        const auto sb = broadcast_strides(shb, out.size());
        if (op == BinOp::Add || op == BinOp::Sub) {
          if (needs[1]) {
            grads[1] = reduce_to(g, out, shb);
            if (op == BinOp::Sub)
              for (auto& v : grads[1]) v = -v;
          }
          if (needs[0]) grads[0] = sha == out ? std::move(g) : reduce_to(g, out, sha);
          return grads;
        }
        const double* xa = da ? da->data() : nullptr;
        const double* xb = db->data();
        if (needs[0]) {
          Buffer ga(static_cast<std::size_t>(shape_numel(sha)), 0.0);
          walk2(out, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
            ga[ia] += op == BinOp::Mul ? g[o] * xb[ib] : g[o] / xb[ib];
          });
          grads[0] = std::move(ga);
        }
        if (needs[1]) {
          Buffer gb(static_cast<std::size_t>(shape_numel(shb)), 0.0);
          walk2(out, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
            gb[ib] += op == BinOp::Mul ? g[o] * xa[ia] : -g[o] * xa[ia] / (xb[ib] * xb[ib]);
          });
          grads[1] = std::move(gb);
        }
        return grads;
      },
      name);
}

enum Saves : unsigned { kNone = 0, kInput = 1, kOutput = 2 };

/// Unary op whose derivative is expressed through the input x and/or output
/// y; only the buffers named in `saves` are kept alive for the backward pass.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv, unsigned saves, const char* name) {
  const auto src = a.data();
  Buffer r(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) r[i] = fwd(src[i]);
  instrument::add_flops(src.size());
  auto out = autograd::make_output(a.shape(), std::move(r), {a}, nullptr, name);
  if (out.impl()->grad_fn) {
    std::shared_ptr<Buffer> x = (saves & kInput) ? a.impl()->data : nullptr;
    // Capture the output buffer, never its TensorImpl (ownership cycle).
    std::shared_ptr<Buffer> y = (saves & kOutput) ? out.impl()->data : nullptr;
    out.impl()->grad_fn->backward = [x, y, deriv](Buffer g, const std::vector<bool>&) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= deriv(x ? (*x)[i] : 0.0, y ? (*y)[i] : 0.0);
      return std::vector<Buffer>{std::move(g)};
    };
  }
  return out;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Div, "div"); }

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; }, kNone, "scale");
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      a, [value](double x) { return x + value; }, [](double, double) { return 1.0; }, kNone, "add_scalar");
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; }, kInput, "square");
}

Tensor gelu(const Tensor& a) {
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      },
      kInput, "gelu");
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); }, kOutput, "sigmoid");
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double, double y) { return y > 0 ? 1.0 : 0.0; }, kOutput, "relu");
}

Tensor elu_plus_one(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0 ? x + 1.0 : std::exp(x); },
      [](double, double y) { return y > 1.0 ? 1.0 : y; }, kOutput, "elu_plus_one");
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
  if (logits.shape() != target.shape())
    throw DimensionError("bce_with_logits: logits " + shape_str(logits.shape()) + " vs target " +
                             shape_str(target.shape()),
                         -1);
  const auto z = logits.data();
  const auto y = target.data();
  const auto n = z.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    total += std::max(z[i], 0.0) - z[i] * y[i] + std::log1p(std::exp(-std::abs(z[i])));
  instrument::add_flops(4 * n);
  auto zd = logits.impl()->data;
  auto yd = target.impl()->data;
  return autograd::make_output(
      {}, Buffer{total / static_cast<double>(n)}, {logits, target},
      [zd, yd](Buffer g, const std::vector<bool>& needs) {
        std::vector<Buffer> grads(2);
        const double s = g[0] / static_cast<double>(zd->size());
        if (needs[0]) {
          Buffer gz(zd->size());
          for (std::size_t i = 0; i < gz.size(); ++i) {
            const double zi = (*zd)[i];
            const double sig = zi >= 0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
            gz[i] = s * (sig - (*yd)[i]);
          }
          grads[0] = std::move(gz);
        }
        if (needs[1]) {
          Buffer gy(yd->size());
          for (std::size_t i = 0; i < gy.size(); ++i) gy[i] = -s * (*zd)[i];
          grads[1] = std::move(gy);
        }
        return grads;
      },
      "bce_with_logits");
}

}  // namespace balr
