#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "balr/adapter.hpp"
#include "balr/attention.hpp"

namespace balr {

/// Pre-norm transformer block. With adapters inserted the forward is
///   y   = x + A + Adapter1(A),          A = MHSA(LN1(x))
///   out = y + MLP(LN2(y)) + Adapter2(LN2(y))
struct ViTBlock {
  LayerNormParams ln1;
  MhsaWeights attn;
  LayerNormParams ln2;
  Mlp mlp;
  std::optional<LowRankAdapter> adapter_attn;
  std::optional<LowRankAdapter> adapter_mlp;

  static ViTBlock create(std::int64_t dim, std::int64_t heads, std::int64_t mlp_hidden, Rng& rng, bool trainable);
  std::int64_t dim() const { return attn.dim(); }
  bool has_adapters() const { return adapter_attn.has_value() || adapter_mlp.has_value(); }
  void collect(ParamList& out, const std::string& prefix) const;
};

Tensor block_forward(const Tensor& x, const ViTBlock& block);

/// Freezes the block's base weights and adds one trainable adapter at each
/// site. Throws ConfigError if the block already carries adapters.
ViTBlock insert_adapters(ViTBlock block, std::int64_t rank, double s_init, Rng& rng);

}  // namespace balr
