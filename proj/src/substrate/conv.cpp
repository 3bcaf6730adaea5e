#include <algorithm>
#include <cmath>

#include "balr/ops.hpp"
#include "detail.hpp"

namespace balr {
namespace {

struct ConvGeometry {
  std::int64_t n, c_in, h, w;
  std::int64_t c_out, kh, kw, stride, pad, groups;
  std::int64_t ho, wo;
  std::int64_t cin_g() const { return c_in / groups; }
  std::int64_t cout_g() const { return c_out / groups; }
  std::int64_t patch() const { return cin_g() * kh * kw; }
  std::int64_t plane() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

ConvGeometry check_conv(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvSpec& spec) {
  if (x.rank() != 4) throw DimensionError("conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()), -1);
  if (weight.rank() != 4) throw DimensionError("conv2d: weight must be rank 4, got " + shape_str(weight.shape()), -1);
  if (spec.kernel_h <= 0 || spec.kernel_w <= 0 || spec.stride <= 0 || spec.padding < 0 || spec.groups <= 0)
    throw ConfigError("conv2d: invalid ConvSpec");
  ConvGeometry g{};
  g.n = x.size(0);
  g.c_in = x.size(1);
  g.h = x.size(2);
  g.w = x.size(3);
  g.c_out = weight.size(0);
  g.kh = spec.kernel_h;
  g.kw = spec.kernel_w;
  g.stride = spec.stride;
  g.pad = spec.padding;
  g.groups = spec.groups;
  if (g.c_in % g.groups != 0) throw DimensionError("conv2d: in_channels " + std::to_string(g.c_in) + " not divisible by groups", 1);
  if (g.c_out % g.groups != 0) throw DimensionError("conv2d: out_channels " + std::to_string(g.c_out) + " not divisible by groups", 0);
  if (weight.size(1) != g.cin_g())
    throw DimensionError("conv2d: weight expects " + std::to_string(weight.size(1) * g.groups) + " input channels, input has " +
                             std::to_string(g.c_in),
                         1);
  if (weight.size(2) != g.kh) throw DimensionError("conv2d: weight kernel height differs from spec", 2);
  if (weight.size(3) != g.kw) throw DimensionError("conv2d: weight kernel width differs from spec", 3);
  if (bias.defined() && (bias.rank() != 1 || bias.size(0) != g.c_out))
    throw DimensionError("conv2d: bias must be [" + std::to_string(g.c_out) + "], got " + shape_str(bias.shape()), 0);
  const std::int64_t eh = g.h + 2 * g.pad - g.kh;
  const std::int64_t ew = g.w + 2 * g.pad - g.kw;
  if (eh < 0) throw DimensionError("conv2d: input height too small for kernel", 2);
  if (ew < 0) throw DimensionError("conv2d: input width too small for kernel", 3);
  g.ho = eh / g.stride + 1;
  g.wo = ew / g.stride + 1;
  return g;
}

/// Gathers the receptive fields of one group of one image into a
/// [patch, ho*wo] matrix (zero padding).
void im2col(const ConvGeometry& g, const double* img, double* col) {
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.cin_g(); ++c) {
    const double* plane = img + c * g.h * g.w;
    for (std::int64_t ky = 0; ky < g.kh; ++ky)
      for (std::int64_t kx = 0; kx < g.kw; ++kx, ++row) {
        double* dst = col + row * g.plane();
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            dst[oy * g.wo + ox] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? plane[iy * g.w + ix] : 0.0;
          }
        }
      }
  }
}

void col2im(const ConvGeometry& g, const double* col, double* img) {
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.cin_g(); ++c) {
    double* plane = img + c * g.h * g.w;
    for (std::int64_t ky = 0; ky < g.kh; ++ky)
      for (std::int64_t kx = 0; kx < g.kw; ++kx, ++row) {
        const double* src = col + row * g.plane();
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) plane[iy * g.w + ix] += src[oy * g.wo + ox];
          }
        }
      }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvSpec& spec) {
  const ConvGeometry g = check_conv(x, weight, bias, spec);
  const std::int64_t in_image = g.c_in * g.h * g.w;
  const std::int64_t out_image = g.c_out * g.plane();
  Buffer out(static_cast<std::size_t>(g.n * out_image));
  std::vector<double> col(g.pointwise() ? 0 : static_cast<std::size_t>(g.patch() * g.plane()));
  const double* px = x.data().data();
  const double* pw = weight.data().data();
  for (std::int64_t b = 0; b < g.n; ++b)
    for (std::int64_t gr = 0; gr < g.groups; ++gr) {
      const double* img = px + b * in_image + gr * g.cin_g() * g.h * g.w;
      const double* cols = img;
      if (!g.pointwise()) {
        im2col(g, img, col.data());
        cols = col.data();
      }
      kernels::gemm(false, false, g.cout_g(), g.plane(), g.patch(), pw + gr * g.cout_g() * g.patch(), cols,
                    out.data() + b * out_image + gr * g.cout_g() * g.plane(), false);
    }
  if (bias.defined()) {
    const double* pb = bias.data().data();
    for (std::int64_t b = 0; b < g.n; ++b)
      for (std::int64_t c = 0; c < g.c_out; ++c) {
        double* dst = out.data() + b * out_image + c * g.plane();
        for (std::int64_t i = 0; i < g.plane(); ++i) dst[i] += pb[c];
      }
    instrument::add_flops(static_cast<std::uint64_t>(g.n * out_image));
  }

  std::shared_ptr<Buffer> xd = weight.requires_grad() ? x.impl()->data : nullptr;
  std::shared_ptr<Buffer> wd = x.requires_grad() ? weight.impl()->data : nullptr;
  const bool has_bias = bias.defined();
  return autograd::make_output(
      {g.n, g.c_out, g.ho, g.wo}, std::move(out), {x, weight, bias},
      [g, xd, wd, in_image, out_image, has_bias](Buffer gy, const std::vector<bool>& needs) {
        std::vector<Buffer> grads(3);
        std::vector<double> col(static_cast<std::size_t>(g.patch() * g.plane()));
        if (needs[1]) {
          Buffer gw(static_cast<std::size_t>(g.c_out * g.patch()), 0.0);
          for (std::int64_t b = 0; b < g.n; ++b)
            for (std::int64_t gr = 0; gr < g.groups; ++gr) {
              const double* img = xd->data() + b * in_image + gr * g.cin_g() * g.h * g.w;
              const double* cols = img;
              if (!g.pointwise()) {
                im2col(g, img, col.data());
                cols = col.data();
              }
              kernels::gemm(false, true, g.cout_g(), g.patch(), g.plane(),
                            gy.data() + b * out_image + gr * g.cout_g() * g.plane(), cols,
                            gw.data() + gr * g.cout_g() * g.patch(), true);
            }
          grads[1] = std::move(gw);
        }
        if (needs[2] && has_bias) {
          Buffer gb(static_cast<std::size_t>(g.c_out), 0.0);
          for (std::int64_t b = 0; b < g.n; ++b)
            for (std::int64_t c = 0; c < g.c_out; ++c) {
              const double* src = gy.data() + b * out_image + c * g.plane();
              double s = 0;
              for (std::int64_t i = 0; i < g.plane(); ++i) s += src[i];
              gb[static_cast<std::size_t>(c)] += s;
            }
          grads[2] = std::move(gb);
        }
        if (needs[0]) {
          Buffer gx(static_cast<std::size_t>(g.n * in_image), 0.0);
          for (std::int64_t b = 0; b < g.n; ++b)
            for (std::int64_t gr = 0; gr < g.groups; ++gr) {
              double* dst = gx.data() + b * in_image + gr * g.cin_g() * g.h * g.w;
              const double* gys = gy.data() + b * out_image + gr * g.cout_g() * g.plane();
              const double* wg = wd->data() + gr * g.cout_g() * g.patch();
              if (g.pointwise()) {
                kernels::gemm(true, false, g.patch(), g.plane(), g.cout_g(), wg, gys, dst, true);
              } else {
                kernels::gemm(true, false, g.patch(), g.plane(), g.cout_g(), wg, gys, col.data(), false);
                col2im(g, col.data(), dst);
              }
            }
          grads[0] = std::move(gx);
        }
        return grads;
      },
      "conv2d");
}

Tensor depthwise_separable_conv(const Tensor& x, const Tensor& dw_weight, const Tensor& pw_weight,
                                const ConvSpec& spec, const Tensor& dw_bias, const Tensor& pw_bias) {
  if (x.rank() != 4) throw DimensionError("depthwise_separable_conv: input must be [N,C,H,W]", -1);
  if (spec.groups != x.size(1))
    throw ConfigError("depthwise_separable_conv: depthwise stage needs groups == in_channels (" +
                      std::to_string(x.size(1)) + "), got " + std::to_string(spec.groups));
  if (pw_weight.rank() != 4 || pw_weight.size(2) != 1 || pw_weight.size(3) != 1)
    throw DimensionError("depthwise_separable_conv: pointwise weight must be [C_out, C, 1, 1]", 2);
  auto depthwise = conv2d(x, dw_weight, dw_bias, spec);
  return conv2d(depthwise, pw_weight, pw_bias, ConvSpec{});
}

DscParamCount dsc_param_count(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel) {
  return {in_channels * kernel * kernel + in_channels * out_channels, in_channels * out_channels * kernel * kernel};
}

namespace {

struct Taps {
  std::vector<std::int64_t> lo, hi;
  std::vector<double> frac;
};

Taps make_taps(std::int64_t in, std::int64_t out) {
  Taps t;
  t.lo.resize(static_cast<std::size_t>(out));
  t.hi.resize(static_cast<std::size_t>(out));
  t.frac.resize(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t i = 0; i < out; ++i) {
    const double src = std::max(0.0, (static_cast<double>(i) + 0.5) * ratio - 0.5);
    auto lo = static_cast<std::int64_t>(std::floor(src));
    lo = std::min(lo, in - 1);
    const auto u = static_cast<std::size_t>(i);
    t.lo[u] = lo;
    t.hi[u] = std::min(lo + 1, in - 1);
    t.frac[u] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  if (out_h < 1 || out_w < 1) throw ConfigError("bilinear_resize: target size must be at least 1x1");
  if (x.rank() != 4) throw DimensionError("bilinear_resize: expected [N,C,H,W], got " + shape_str(x.shape()), -1);
  const std::int64_t h = x.size(2);
  const std::int64_t w = x.size(3);
  if (h == out_h && w == out_w) {
    return autograd::make_output(
        x.shape(), Buffer(x.data().begin(), x.data().end()), {x},
        [](Buffer g, const std::vector<bool>&) { return std::vector<Buffer>{std::move(g)}; }, "bilinear_resize");
  }
  const std::int64_t planes = x.size(0) * x.size(1);
  auto ty = make_taps(h, out_h);
  auto tx = make_taps(w, out_w);
  Buffer out(static_cast<std::size_t>(planes * out_h * out_w));
  const double* src = x.data().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* in = src + p * h * w;
    double* dst = out.data() + p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const auto y = static_cast<std::size_t>(oy);
      const double fy = ty.frac[y];
      const double* r0 = in + ty.lo[y] * w;
      const double* r1 = in + ty.hi[y] * w;
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const auto xx = static_cast<std::size_t>(ox);
        const double fx = tx.frac[xx];
        const double top = (1.0 - fx) * r0[tx.lo[xx]] + fx * r0[tx.hi[xx]];
        const double bot = (1.0 - fx) * r1[tx.lo[xx]] + fx * r1[tx.hi[xx]];
        dst[oy * out_w + ox] = (1.0 - fy) * top + fy * bot;
      }
    }
  }
  instrument::add_flops(static_cast<std::uint64_t>(8 * planes * out_h * out_w));
  return autograd::make_output(
      {x.size(0), x.size(1), out_h, out_w}, std::move(out), {x},
      [ty, tx, planes, h, w, out_h, out_w](Buffer g, const std::vector<bool>&) {
        Buffer gx(static_cast<std::size_t>(planes * h * w), 0.0);
        for (std::int64_t p = 0; p < planes; ++p) {
          double* in = gx.data() + p * h * w;
          const double* gs = g.data() + p * out_h * out_w;
          for (std::int64_t oy = 0; oy < out_h; ++oy) {
            const auto y = static_cast<std::size_t>(oy);
            const double fy = ty.frac[y];
            double* r0 = in + ty.lo[y] * w;
            double* r1 = in + ty.hi[y] * w;
            for (std::int64_t ox = 0; ox < out_w; ++ox) {
              const auto xx = static_cast<std::size_t>(ox);
              const double fx = tx.frac[xx];
              const double v = gs[oy * out_w + ox];
              r0[tx.lo[xx]] += (1.0 - fy) * (1.0 - fx) * v;
              r0[tx.hi[xx]] += (1.0 - fy) * fx * v;
              r1[tx.lo[xx]] += fy * (1.0 - fx) * v;
              r1[tx.hi[xx]] += fy * fx * v;
            }
          }
        }
        return std::vector<Buffer>{std::move(gx)};
      },
      "bilinear_resize");
}

}  // namespace balr
