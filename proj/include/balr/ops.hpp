#pragma once

// Differentiable primitives over balr::Tensor. All ops are pure: they never
// modify their inputs, and outputs are checked for NaN/Inf.

#include <cstdint>
#include <vector>

#include "balr/tensor.hpp"

namespace balr {

enum class Trans : bool { No = false, Yes = true };

/// Geometry of a 2-D convolution. `groups == in_channels` is depthwise.
struct ConvSpec {
  std::int64_t kernel_h = 1;
  std::int64_t kernel_w = 1;
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t groups = 1;

  static ConvSpec square(std::int64_t k, std::int64_t stride = 1, std::int64_t padding = 0, std::int64_t groups = 1) {
    return {k, k, stride, padding, groups};
  }
};

// Elementwise; binary ops broadcast numpy-style (right-aligned, extent 1 stretches).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);

/// Exact erf form: 0.5 x (1 + erf(x / sqrt 2)).
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
/// elu(x) + 1; strictly positive.
Tensor elu_plus_one(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// Shape manipulation.
/// Shares storage with the input.
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<std::int64_t>& order);
Tensor transpose(const Tensor& a, std::int64_t axis0, std::int64_t axis1);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis);

/// Batched matrix product over the last two axes. Leading (batch) axes must
/// match, or one operand must be a plain matrix shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b, Trans trans_a = Trans::No, Trans trans_b = Trans::No);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, const std::vector<std::int64_t>& axes, bool keepdim);
Tensor mean(const Tensor& a, const std::vector<std::int64_t>& axes, bool keepdim);
/// Gradient goes to the first maximal element.
Tensor amax(const Tensor& a, const std::vector<std::int64_t>& axes, bool keepdim);
/// Softmax over the last axis.
Tensor softmax(const Tensor& a);
/// Normalizes over the last axis; gamma and beta have that axis' extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// Spatial ops on [N, C, H, W].
/// weight is [C_out, C_in / groups, kernel_h, kernel_w]; bias is [C_out] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvSpec& spec);
/// Depthwise conv (spec.groups must equal C_in) followed by a 1x1 pointwise conv.
Tensor depthwise_separable_conv(const Tensor& x, const Tensor& dw_weight, const Tensor& pw_weight,
                                const ConvSpec& spec, const Tensor& dw_bias = {}, const Tensor& pw_bias = {});
/// Parameter count of a depthwise-separable conv vs the dense conv it replaces.
struct DscParamCount {
  std::int64_t separable;
  std::int64_t dense;
};
DscParamCount dsc_param_count(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel);

/// Bilinear interpolation with the align_corners=false convention: output
/// pixel i samples source coordinate (i + 0.5) * in/out - 0.5, clamped to the
/// valid range. Same-size resize returns an exact copy.
Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w);
Tensor global_avg_pool(const Tensor& x);
Tensor global_max_pool(const Tensor& x);

/// Mean binary cross-entropy on logits, numerically stable form.
Tensor bce_with_logits(const Tensor& logits, const Tensor& target);

namespace kernels {
/// Row-major C (M x N) = op(A) * op(B), optionally accumulating into C.
/// op(A) is M x K; A is stored K x M when trans_a. Same for B (N x K when trans_b).
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const double* a,
          const double* b, double* c, bool accumulate);
}  // namespace kernels

}  // namespace balr
