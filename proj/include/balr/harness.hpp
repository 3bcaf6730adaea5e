#pragma once

// Tiny segmentation model: frozen ViT encoder (optionally with adapters),
// optional CDEN branch added to the encoder tokens, a two-block mask decoder
// (low-rank or frozen softmax attention) and an upsampling prediction head.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "balr/block.hpp"
#include "balr/cden.hpp"
#include "balr/config.hpp"

namespace balr {

struct HarnessConfig {
  std::int64_t image_size = 128;
  std::int64_t patch_size = 16;
  std::int64_t in_channels = 3;
  std::int64_t embed_dim = 192;
  std::int64_t depth = 6;
  std::int64_t heads = 6;
  std::int64_t mlp_ratio = 4;
  std::int64_t adapter_rank = 16;
  double adapter_s_init = 1.0;
  std::array<std::int64_t, 3> attn_ranks{8, 8, 8};
  bool rope_enabled = true;
  std::int64_t decoder_depth = 2;
  /// Replace the token-to-image cross-attention too, not only self-attention.
  bool lr_cross_attention = true;
  std::array<std::int64_t, 5> cden_channels{8, 16, 24, 32, 48};
  bool cden_fuse_e2 = false;
  std::int64_t head_channels = 16;

  bool use_adapters = true;
  bool use_cden = true;
  bool use_lr_attention = true;

  void validate() const;
  std::int64_t grid() const { return image_size / patch_size; }
  TensorAttnConfig attention_config() const;
  CDENConfig cden_config() const;
  /// key = value lines, readable by parse_harness_config.
  std::string to_text() const;
};

/// Parses the key = value lines written by HarnessConfig::to_text. Unknown
/// keys and malformed values raise FormatError with the line and column;
/// out-of-range values raise ConfigError.
HarnessConfig parse_harness_config(const std::string& text);
/// Same, for one section of a larger document. Keys absent from the section
/// keep their value from `base`.
HarnessConfig harness_config_from_section(const ConfigSection* section, HarnessConfig base = {});

struct DecoderBlock {
  LayerNormParams ln_self;
  MhsaWeights self_attn;
  std::optional<LrAttentionWeights> self_lr;
  LayerNormParams ln_cross;
  MhsaWeights cross_attn;
  std::optional<LrAttentionWeights> cross_lr;
  LayerNormParams ln_mlp;
  Mlp mlp;

  void collect(ParamList& out, const std::string& prefix) const;
};

struct PredictionHead {
  Conv2d reduce;                 // 1x1, embed -> head channels
  std::vector<Conv2d> upsample;  // 3x3 after each 2x bilinear step
  Linear hyper;                  // mask token -> per-channel weights
  Tensor bias;                   // scalar

  void collect(ParamList& out, const std::string& prefix) const;
};

struct Model {
  HarnessConfig cfg;
  Conv2d patch_embed;
  Tensor pos_embed;  // [1, grid^2, D]
  std::vector<ViTBlock> blocks;
  LayerNormParams encoder_norm;
  std::optional<CdenParams> cden;
  Tensor cden_gate;  // scalar multiplying the CDEN map before fusion
  Tensor mask_token;  // [1, 1, D]
  std::vector<DecoderBlock> decoder;
  PredictionHead head;

  /// Every tensor in a fixed order with a unique dotted name.
  ParamList parameters() const;
  std::vector<Tensor> trainable() const;
};

/// Deterministic in (cfg, seed). Each component draws from its own named
/// substream, so toggling one flag leaves the other components' weights unchanged.
Model build_balr_model(const HarnessConfig& cfg, std::uint64_t seed);

/// image [N, C, H, W] at cfg.image_size; returns logits [N, 1, H, W].
Tensor forward_segment(const Model& model, const Tensor& image);

struct ParameterSplit {
  std::int64_t frozen = 0;
  std::int64_t trainable = 0;
  double fraction() const {
    return static_cast<double>(trainable) / static_cast<double>(frozen + trainable);
  }
};

ParameterSplit trainable_parameter_split(const Model& model);

/// Closed-form counts for a configuration, without building the model.
struct ParameterBreakdown {
  std::int64_t encoder_frozen = 0;
  std::int64_t decoder_frozen = 0;
  std::int64_t adapters = 0;
  std::int64_t lr_attention = 0;
  std::int64_t cden = 0;
  std::int64_t head = 0;
  ParameterSplit split() const;
};
ParameterBreakdown count_parameters(const HarnessConfig& cfg);

/// ViT-H/16 at 1024 px (embed 1280, depth 32, heads 16) with adapter rank 16,
/// attention ranks 8 and the default CDEN widths.
HarnessConfig sam_vit_h_config();

struct SamScaleEstimate {
  ParameterBreakdown breakdown;
  std::int64_t trainable = 0;
  double fraction_of_reference = 0.0;  // trainable / reference_total
  std::int64_t reference_total = 636000000;
};
SamScaleEstimate sam_scale_extrapolation(const HarnessConfig& cfg = sam_vit_h_config());

}  // namespace balr
