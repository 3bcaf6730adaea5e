#pragma once

// Low-rank factored linear maps and the bottleneck adapter built from them.

#include <cstdint>
#include <string>

#include "balr/layers.hpp"

namespace balr {

/// W ~= U V^T with U [m, r] and V [n, r]; maps the last axis n -> m.
/// The m x n product is never formed.
struct LowRankLinear {
  Tensor u;
  Tensor v;

  static LowRankLinear create(std::int64_t out, std::int64_t in, std::int64_t rank, Rng& rng, double stddev,
                              bool trainable);
  std::int64_t out_features() const { return u.size(0); }
  std::int64_t in_features() const { return v.size(0); }
  std::int64_t rank() const { return u.size(1); }
  /// Throws DimensionError on inconsistent factors, ConfigError on rank > min(m, n).
  void validate() const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// x V U^T, computed as two thin products.
Tensor lowrank_apply(const Tensor& x, const LowRankLinear& lin);

/// s * up(GELU(down(x))) with a rank-r bottleneck. Returns the delta only;
/// the caller owns the residual addition.
struct LowRankAdapter {
  LowRankLinear down;  // m -> r
  LowRankLinear up;    // r -> m
  Tensor s;            // scalar

  /// U_down, V_down ~ N(0, 0.02); U_up = 0, so the initial delta is zero.
  static LowRankAdapter create(std::int64_t dim, std::int64_t rank, Rng& rng, double s_init = 1.0);
  std::int64_t dim() const { return down.in_features(); }
  std::int64_t rank() const { return down.out_features(); }
  void validate() const;
  void collect(ParamList& out, const std::string& prefix) const;
  std::int64_t parameter_count() const;
};

Tensor adapter_forward(const Tensor& x, const LowRankAdapter& a);

struct AdapterParamCount {
  std::int64_t lowrank;
  std::int64_t fullrank;
  double reduction;  // 1 - lowrank / fullrank
};

/// Parameters of one m x n matrix stored as rank-r factors vs dense.
AdapterParamCount adapter_param_count(std::int64_t m, std::int64_t n, std::int64_t r);

/// Scalars in one adapter of width m and rank r: both factored projections plus s.
constexpr std::int64_t adapter_scalar_count(std::int64_t m, std::int64_t r) { return 2 * (m + r) * r + 1; }

enum class AdapterSite { PostAttention, MlpResidual };

struct AdapterPlacement {
  AdapterSite site;
};

const char* site_name(AdapterSite site);

}  // namespace balr
