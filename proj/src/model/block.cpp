#include "balr/block.hpp"

#include "balr/errors.hpp"

namespace balr {

ViTBlock ViTBlock::create(std::int64_t dim, std::int64_t heads, std::int64_t mlp_hidden, Rng& rng, bool trainable) {
  ViTBlock b;
  b.ln1 = LayerNormParams::create(dim, trainable);
  b.attn = MhsaWeights::create(dim, heads, rng, trainable);
  b.ln2 = LayerNormParams::create(dim, trainable);
  b.mlp = Mlp::create(dim, mlp_hidden, rng, trainable);
  return b;
}

void ViTBlock::collect(ParamList& out, const std::string& prefix) const {
  ln1.collect(out, prefix + "ln1.");
  attn.collect(out, prefix + "attn.");
  ln2.collect(out, prefix + "ln2.");
  mlp.collect(out, prefix + "mlp.");
  if (adapter_attn) adapter_attn->collect(out, prefix + "adapter_attn.");
  if (adapter_mlp) adapter_mlp->collect(out, prefix + "adapter_mlp.");
}

Tensor block_forward(const Tensor& x, const ViTBlock& block) {
  const auto a = mhsa_baseline_forward(layer_norm(x, block.ln1), block.attn);
  auto y = x + a;
  if (block.adapter_attn) y = y + adapter_forward(a, *block.adapter_attn);
  const auto h = layer_norm(y, block.ln2);
  auto out = y + mlp_forward(h, block.mlp);
  if (block.adapter_mlp) out = out + adapter_forward(h, *block.adapter_mlp);
  return out;
}

ViTBlock insert_adapters(ViTBlock block, std::int64_t rank, double s_init, Rng& rng) {
  if (block.has_adapters()) throw ConfigError("insert_adapters: block already carries adapters");
  block.ln1.set_trainable(false);
  block.attn.set_trainable(false);
  block.ln2.set_trainable(false);
  block.mlp.set_trainable(false);
  block.adapter_attn = LowRankAdapter::create(block.dim(), rank, rng, s_init);
  block.adapter_mlp = LowRankAdapter::create(block.dim(), rank, rng, s_init);
  return block;
}

}  // namespace balr
