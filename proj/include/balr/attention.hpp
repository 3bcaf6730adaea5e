#pragma once

// Softmax multi-head self-attention (the quadratic baseline) and low-rank
// tensor attention over CP-style factors of Q, K and V.
//
// Low-rank path, for queries from x_q and keys/values from x_kv:
//   A_m = (x W_m) P_m                        token factors   [n, R_m]
//   A_Q, A_K rotated pairwise (RoPE)         when enabled
//   G   = B_Q^T B_K / (R_Q R_K)              [R_Q, R_K]
//   u   = phi(A_Q G),  k = phi(A_K)          phi(z) = elu(z) + 1
//   C   = k^T A_V,     z = k^T 1
//   o_t = (u_t C) B_V^T / (R_V (u_t . z))
// which is a positive, normalized attention over the value rows
// A_V[s] B_V^T / R_V evaluated without any n x n intermediate.

#include <cstdint>
#include <string>
#include <vector>

#include "balr/layers.hpp"

namespace balr {

struct TensorAttnConfig {
  std::int64_t d = 256;
  std::int64_t rank_q = 8;
  std::int64_t rank_k = 8;
  std::int64_t rank_v = 8;
  bool rope_enabled = true;
  double rope_base = 10000.0;

  /// Throws ConfigError on ranks outside [1, d], or odd Q/K ranks with RoPE on.
  void validate() const;
};

/// Frozen projections of a standard attention layer. Weights are [d, d]
/// applied as x W.
struct MhsaWeights {
  Tensor w_q, w_k, w_v, w_o;
  std::int64_t heads = 1;

  static MhsaWeights create(std::int64_t d, std::int64_t heads, Rng& rng, bool trainable);
  std::int64_t dim() const { return w_q.size(0); }
  void collect(ParamList& out, const std::string& prefix) const;
  void set_trainable(bool flag);
};

/// softmax(Q K^T / sqrt(d_h)) V per head, concatenated, then W_o. The
/// [.., heads, n, n] score tensor is materialized. x is [n, d] or [B, n, d].
Tensor mhsa_baseline_forward(const Tensor& x, const MhsaWeights& w);
/// Cross-attention variant: queries from x_q, keys and values from x_kv.
Tensor mhsa_forward(const Tensor& x_q, const Tensor& x_kv, const MhsaWeights& w);

/// Frozen projections plus the trainable factor maps P_m and bases B_m.
struct LrAttentionWeights {
  MhsaWeights base;  // heads unused
  Tensor p_q, p_k, p_v;
  Tensor b_q, b_k, b_v;
  TensorAttnConfig cfg;

  static LrAttentionWeights create(const TensorAttnConfig& cfg, Rng& rng);
  /// Reuses existing frozen projections; only P and B are drawn from rng.
  static LrAttentionWeights from_base(const MhsaWeights& base, const TensorAttnConfig& cfg, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

struct QKVFactorSet {
  Tensor a_q, a_k, a_v;  // [.., n, R_m]
  Tensor b_q, b_k, b_v;  // [d, R_m]
};

QKVFactorSet factorize_qkv(const Tensor& x, const LrAttentionWeights& w);
QKVFactorSet factorize_qkv(const Tensor& x_q, const Tensor& x_kv, const LrAttentionWeights& w);

/// M = (1/R) A B^T: the matrix whose per-token rank-1 sum the factors encode.
Tensor reconstruct(const Tensor& a, const Tensor& b);

/// Rotation angles theta_{t,j} = t * base^(-2j/R) for each listed position.
struct RotaryTable {
  std::vector<std::int64_t> positions;
  std::int64_t rank = 0;
  double base = 10000.0;
  std::vector<double> cos;  // [positions, rank / 2]
  std::vector<double> sin;

  static RotaryTable sequential(std::int64_t n, std::int64_t rank, double base = 10000.0);
  static RotaryTable at_positions(std::vector<std::int64_t> positions, std::int64_t rank, double base = 10000.0);
};

/// Rotates each pair (2j, 2j+1) of row t. A is [.., n, R] with n equal to
/// the table length.
Tensor apply_rope(const Tensor& a, const RotaryTable& table);

/// Linear-complexity attention over (already rotated) factors. Output is
/// [.., n_q, d]. Throws NumericError if a normalizer falls below 1e-30.
Tensor lr_attention_forward(const QKVFactorSet& f, const TensorAttnConfig& cfg);

/// factorize_qkv -> RoPE (self-attention only) -> lr_attention_forward -> W_o.
Tensor lr_attention_layer(const Tensor& x, const LrAttentionWeights& w);
Tensor lr_cross_attention_layer(const Tensor& x_q, const Tensor& x_kv, const LrAttentionWeights& w);

namespace hooks {
/// Test hook: when set, every 1/R prefactor becomes 1/(R+1). Used to check
/// that the verification suite notices a corrupted reconstruction.
void set_rank_prefactor_fault(bool enabled) noexcept;
bool rank_prefactor_fault() noexcept;
}  // namespace hooks

}  // namespace balr
