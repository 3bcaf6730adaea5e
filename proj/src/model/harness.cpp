#include "balr/harness.hpp"

#include <cstdio>
#include <sstream>

#include "balr/errors.hpp"

namespace balr {
namespace {

bool is_power_of_two(std::int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

std::int64_t log2_exact(std::int64_t v) {
  std::int64_t k = 0;
  while ((std::int64_t{1} << k) < v) ++k;
  return k;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <std::size_t N>
std::string join(const std::array<std::int64_t, N>& values) {
  std::string out;
  for (std::size_t i = 0; i < N; ++i) out += (i ? ", " : "") + std::to_string(values[i]);
  return out;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("model: " + what);
}

std::int64_t linear_count(std::int64_t in, std::int64_t out) { return in * out + out; }
std::int64_t conv_count(std::int64_t in, std::int64_t out, std::int64_t k) { return out * in * k * k + out; }
std::int64_t dsc_count(std::int64_t in, std::int64_t out) { return conv_count(1, in, 3) + conv_count(in, out, 1); }

std::int64_t vit_block_count(std::int64_t d, std::int64_t hidden) {
  return 4 * d + 4 * d * d + linear_count(d, hidden) + linear_count(hidden, d);
}

std::int64_t cden_count(const CDENConfig& c) {
  const auto& ch = c.stage_channels;
  std::int64_t total = conv_count(c.in_channels, ch[0], 3) + 2 * dsc_count(ch[0], ch[0]);
  for (std::size_t i = 0; i < 4; ++i) total += dsc_count(ch[i], ch[i + 1]);
  for (std::size_t i = 2; i < 5; ++i) {
    const auto k = ch[i], hidden = ch[i] / c.cbam_reduction;
    total += 2 * conv_count(k, k, 1) + conv_count(k, k, 3);
    total += linear_count(k, hidden) + linear_count(hidden, k) + conv_count(2, 1, c.cbam_kernel);
  }
  const auto fused = ch[0] + (c.fuse_e2 ? ch[1] : 0) + ch[2] + ch[3] + ch[4];
  return total + conv_count(fused, c.embed_dim, 1);
}

}  // namespace

void HarnessConfig::validate() const {
  require(image_size > 0 && patch_size > 0, "image_size and patch_size must be positive");
  require(is_power_of_two(patch_size), "patch_size must be a power of two, got " + std::to_string(patch_size));
  require(image_size % patch_size == 0, "image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                                            std::to_string(patch_size));
  require(in_channels > 0, "in_channels must be positive");
  require(embed_dim > 0 && heads > 0 && embed_dim % heads == 0,
          "embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " + std::to_string(heads));
  require(depth > 0, "depth must be positive");
  require(mlp_ratio > 0, "mlp_ratio must be positive");
  require(decoder_depth > 0, "decoder_depth must be positive");
  require(head_channels > 0, "head_channels must be positive");
  if (use_adapters) require(adapter_rank > 0 && adapter_rank <= embed_dim, "adapter_rank must lie in [1, embed_dim]");
  if (use_lr_attention) attention_config().validate();
  if (use_cden) {
    const auto cc = cden_config();
    cc.validate();
    const auto s = cc.stage_strides[4];
    require(image_size % s == 0, "image_size " + std::to_string(image_size) + " is not divisible by " +
                                     std::to_string(s) + " as the CDEN branch needs; pad by " +
                                     std::to_string(s - image_size % s) + " pixels");
  }
}

TensorAttnConfig HarnessConfig::attention_config() const {
  TensorAttnConfig c;
  c.d = embed_dim;
  c.rank_q = attn_ranks[0];
  c.rank_k = attn_ranks[1];
  c.rank_v = attn_ranks[2];
  c.rope_enabled = rope_enabled;
  return c;
}

CDENConfig HarnessConfig::cden_config() const {
  CDENConfig c;
  c.in_channels = in_channels;
  for (std::size_t i = 0; i < 5; ++i) c.stage_channels[i] = cden_channels[i];
  c.embed_dim = embed_dim;
  c.fuse_e2 = cden_fuse_e2;
  return c;
}

std::string HarnessConfig::to_text() const {
  std::ostringstream out;
  auto b = [](bool v) { return v ? "true" : "false"; };
  out << "image_size = " << image_size << "\n"
      << "patch_size = " << patch_size << "\n"
      << "in_channels = " << in_channels << "\n"
      << "embed_dim = " << embed_dim << "\n"
      << "depth = " << depth << "\n"
      << "heads = " << heads << "\n"
      << "mlp_ratio = " << mlp_ratio << "\n"
      << "adapter_rank = " << adapter_rank << "\n"
      << "adapter_s_init = " << format_double(adapter_s_init) << "\n"
      << "attn_ranks = " << join(attn_ranks) << "\n"
      << "rope_enabled = " << b(rope_enabled) << "\n"
      << "decoder_depth = " << decoder_depth << "\n"
      << "lr_cross_attention = " << b(lr_cross_attention) << "\n"
      << "cden_channels = " << join(cden_channels) << "\n"
      << "cden_fuse_e2 = " << b(cden_fuse_e2) << "\n"
      << "head_channels = " << head_channels << "\n"
      << "use_adapters = " << b(use_adapters) << "\n"
      << "use_cden = " << b(use_cden) << "\n"
      << "use_lr_attention = " << b(use_lr_attention) << "\n";
  return out.str();
}

HarnessConfig harness_config_from_section(const ConfigSection* section, HarnessConfig base) {
  auto c = base;
  SectionReader r(section);
  r.read("image_size", c.image_size);
  r.read("patch_size", c.patch_size);
  r.read("in_channels", c.in_channels);
  r.read("embed_dim", c.embed_dim);
  r.read("depth", c.depth);
  r.read("heads", c.heads);
  r.read("mlp_ratio", c.mlp_ratio);
  r.read("adapter_rank", c.adapter_rank);
  r.read("adapter_s_init", c.adapter_s_init);
  r.read("attn_ranks", c.attn_ranks);
  r.read("rope_enabled", c.rope_enabled);
  r.read("decoder_depth", c.decoder_depth);
  r.read("lr_cross_attention", c.lr_cross_attention);
  r.read("cden_channels", c.cden_channels);
  r.read("cden_fuse_e2", c.cden_fuse_e2);
  r.read("head_channels", c.head_channels);
  r.read("use_adapters", c.use_adapters);
  r.read("use_cden", c.use_cden);
  r.read("use_lr_attention", c.use_lr_attention);
  r.finish();
  c.validate();
  return c;
}

HarnessConfig parse_harness_config(const std::string& text) {
  const auto doc = parse_config_text(text);
  for (const auto& s : doc.sections)
    if (!s.name.empty()) throw FormatError("unexpected section [" + s.name + "]", s.line, 1);
  return harness_config_from_section(doc.find(""));
}

void DecoderBlock::collect(ParamList& out, const std::string& prefix) const {
  ln_self.collect(out, prefix + "ln_self.");
  if (self_lr)
    self_lr->collect(out, prefix + "self_attn.");
  else
    self_attn.collect(out, prefix + "self_attn.");
  ln_cross.collect(out, prefix + "ln_cross.");
  if (cross_lr)
    cross_lr->collect(out, prefix + "cross_attn.");
  else
    cross_attn.collect(out, prefix + "cross_attn.");
  ln_mlp.collect(out, prefix + "ln_mlp.");
  mlp.collect(out, prefix + "mlp.");
}

void PredictionHead::collect(ParamList& out, const std::string& prefix) const {
  reduce.collect(out, prefix + "reduce.");
  for (std::size_t i = 0; i < upsample.size(); ++i) upsample[i].collect(out, prefix + "up" + std::to_string(i) + ".");
  hyper.collect(out, prefix + "hyper.");
  out.push_back({prefix + "bias", bias});
}

ParamList Model::parameters() const {
  ParamList out;
  patch_embed.collect(out, "encoder.patch_embed.");
  out.push_back({"encoder.pos_embed", pos_embed});
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, "encoder.block" + std::to_string(i) + ".");
  encoder_norm.collect(out, "encoder.norm.");
  if (cden) {
    cden->collect(out, "cden.");
    out.push_back({"cden.gate", cden_gate});
  }
  out.push_back({"decoder.mask_token", mask_token});
  for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].collect(out, "decoder.block" + std::to_string(i) + ".");
  head.collect(out, "head.");
  return out;
}

std::vector<Tensor> Model::trainable() const {
  std::vector<Tensor> out;
  for (const auto& p : parameters())
    if (p.tensor.requires_grad()) out.push_back(p.tensor);
  return out;
}

Model build_balr_model(const HarnessConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto d = cfg.embed_dim, g = cfg.grid();
  Model m;
  m.cfg = cfg;

  auto enc = Rng::substream(seed, "encoder");
  m.patch_embed = Conv2d::create(cfg.in_channels, d, ConvSpec::square(cfg.patch_size, cfg.patch_size), enc, false);
  m.pos_embed = make_param({1, g * g, d}, enc, 0.02, false);
  for (std::int64_t i = 0; i < cfg.depth; ++i)
    m.blocks.push_back(ViTBlock::create(d, cfg.heads, cfg.mlp_ratio * d, enc, false));
  m.encoder_norm = LayerNormParams::create(d, false);

  if (cfg.use_adapters) {
    auto rng = Rng::substream(seed, "adapters");
    for (auto& b : m.blocks) b = insert_adapters(std::move(b), cfg.adapter_rank, cfg.adapter_s_init, rng);
  }

  if (cfg.use_cden) {
    auto rng = Rng::substream(seed, "cden");
    m.cden = CdenParams::create(cfg.cden_config(), rng);
    m.cden_gate = make_constant({1}, 1.0, true);
  }

  auto dec = Rng::substream(seed, "decoder");
  m.mask_token = make_param({1, 1, d}, dec, 1.0, false);
  for (std::int64_t i = 0; i < cfg.decoder_depth; ++i) {
    DecoderBlock b;
    b.ln_self = LayerNormParams::create(d, false);
    b.self_attn = MhsaWeights::create(d, cfg.heads, dec, false);
    b.ln_cross = LayerNormParams::create(d, false);
    b.cross_attn = MhsaWeights::create(d, cfg.heads, dec, false);
    b.ln_mlp = LayerNormParams::create(d, false);
    b.mlp = Mlp::create(d, cfg.mlp_ratio * d, dec, false);
    m.decoder.push_back(std::move(b));
  }
  if (cfg.use_lr_attention) {
    auto rng = Rng::substream(seed, "lr_attention");
    const auto ac = cfg.attention_config();
    auto cross_cfg = ac;
    cross_cfg.rope_enabled = false;
    for (auto& b : m.decoder) {
      b.self_lr = LrAttentionWeights::from_base(b.self_attn, ac, rng);
      if (cfg.lr_cross_attention) b.cross_lr = LrAttentionWeights::from_base(b.cross_attn, cross_cfg, rng);
    }
  }

  auto hr = Rng::substream(seed, "head");
  const auto ch = cfg.head_channels;
  m.head.reduce = Conv2d::create(d, ch, ConvSpec{}, hr, true);
  for (std::int64_t i = 0; i < log2_exact(cfg.patch_size); ++i)
    m.head.upsample.push_back(Conv2d::create(ch, ch, ConvSpec::square(3, 1, 1), hr, true));
  m.head.hyper = Linear::create(d, ch, hr, true);
  m.head.bias = make_constant({1}, 0.0, true);
  return m;
}

Tensor forward_segment(const Model& model, const Tensor& image) {
  const auto& cfg = model.cfg;
  if (image.rank() != 4)
    throw DimensionError("forward_segment: expected [N, C, H, W], got " + shape_str(image.shape()), 0);
  if (image.size(1) != cfg.in_channels)
    throw DimensionError("forward_segment: expected " + std::to_string(cfg.in_channels) + " channels, got " +
                             std::to_string(image.size(1)),
                         1);
  for (int axis : {2, 3})
    if (image.size(axis) != cfg.image_size)
      throw DimensionError("forward_segment: model expects " + std::to_string(cfg.image_size) + " px images, got " +
                               shape_str(image.shape()),
                           axis);
  const auto n = image.size(0), d = cfg.embed_dim, g = cfg.grid();

  auto tokens = permute(reshape(conv_forward(image, model.patch_embed), {n, d, g * g}), {0, 2, 1}) + model.pos_embed;
  for (const auto& b : model.blocks) tokens = block_forward(tokens, b);
  tokens = layer_norm(tokens, model.encoder_norm);
  if (model.cden) {
    const auto map = cden_fuse(cden_encode(image, *model.cden), *model.cden) * model.cden_gate;
    tokens = fuse_with_encoder(map, tokens, g, g);
  }

  auto img = tokens;
  auto tok = broadcast_to(model.mask_token, {n, 1, d});
  for (const auto& b : model.decoder) {
    const auto hs = layer_norm(img, b.ln_self);
    img = img + (b.self_lr ? lr_attention_layer(hs, *b.self_lr) : mhsa_baseline_forward(hs, b.self_attn));
    const auto hc = layer_norm(tok, b.ln_cross);
    tok = tok + (b.cross_lr ? lr_cross_attention_layer(hc, img, *b.cross_lr) : mhsa_forward(hc, img, b.cross_attn));
    tok = tok + mlp_forward(layer_norm(tok, b.ln_mlp), b.mlp);
  }

  const auto& h = model.head;
  auto feat = conv_forward(reshape(permute(img, {0, 2, 1}), {n, d, g, g}), h.reduce);
  for (const auto& up : h.upsample) {
    feat = bilinear_resize(feat, feat.size(2) * 2, feat.size(3) * 2);
    feat = gelu(conv_forward(feat, up));
  }
  const auto weights = reshape(linear(tok, h.hyper), {n, cfg.head_channels, 1, 1});
  return sum(feat * weights, {1}, true) + h.bias;
}

ParameterSplit trainable_parameter_split(const Model& model) {
  const auto params = model.parameters();
  return {count_scalars(params, false), count_scalars(params, true)};
}

ParameterSplit ParameterBreakdown::split() const {
  return {encoder_frozen + decoder_frozen, adapters + lr_attention + cden + head};
}

ParameterBreakdown count_parameters(const HarnessConfig& cfg) {
  cfg.validate();
  const auto d = cfg.embed_dim, g = cfg.grid(), hidden = cfg.mlp_ratio * d;
  ParameterBreakdown b;
  b.encoder_frozen = conv_count(cfg.in_channels, d, cfg.patch_size) + g * g * d + cfg.depth * vit_block_count(d, hidden) +
                     2 * d;
  b.decoder_frozen = d + cfg.decoder_depth * (6 * d + 8 * d * d + linear_count(d, hidden) + linear_count(hidden, d));
  if (cfg.use_adapters) b.adapters = cfg.depth * 2 * adapter_scalar_count(d, cfg.adapter_rank);
  if (cfg.use_lr_attention) {
    const auto per = 2 * d * (cfg.attn_ranks[0] + cfg.attn_ranks[1] + cfg.attn_ranks[2]);
    b.lr_attention = cfg.decoder_depth * per * (cfg.lr_cross_attention ? 2 : 1);
  }
  if (cfg.use_cden) b.cden = cden_count(cfg.cden_config()) + 1;
  const auto ch = cfg.head_channels;
  b.head = conv_count(d, ch, 1) + log2_exact(cfg.patch_size) * conv_count(ch, ch, 3) + linear_count(d, ch) + 1;
  return b;
}

HarnessConfig sam_vit_h_config() {
  HarnessConfig c;
  c.image_size = 1024;
  c.patch_size = 16;
  c.embed_dim = 1280;
  c.depth = 32;
  c.heads = 16;
  c.adapter_rank = 16;
  c.attn_ranks = {8, 8, 8};
  const CDENConfig defaults;
  for (std::size_t i = 0; i < 5; ++i) c.cden_channels[i] = defaults.stage_channels[i];
  return c;
}

SamScaleEstimate sam_scale_extrapolation(const HarnessConfig& cfg) {
  SamScaleEstimate e;
  e.breakdown = count_parameters(cfg);
  e.trainable = e.breakdown.split().trainable;
  e.fraction_of_reference = static_cast<double>(e.trainable) / static_cast<double>(e.reference_total);
  return e;
}

}  // namespace balr
