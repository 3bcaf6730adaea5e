#include "balr/cden.hpp"

#include <cmath>

#include "balr/errors.hpp"

namespace balr {

void CDENConfig::validate() const {
  if (in_channels < 1) throw ConfigError("cden: in_channels must be positive");
  if (embed_dim < 1) throw ConfigError("cden: embed_dim must be positive");
  for (std::size_t i = 0; i < 5; ++i)
    if (stage_channels[i] < 1) throw ConfigError("cden: stage " + std::to_string(i + 1) + " has no channels");
  if (stage_strides[0] != 1) throw ConfigError("cden: E1 must keep full resolution (stride 1)");
  for (std::size_t i = 1; i < 5; ++i)
    if (stage_strides[i] != 2 * stage_strides[i - 1])
      throw ConfigError("cden: each stage halves the resolution, so stride " + std::to_string(i + 1) + " must be " +
                        std::to_string(2 * stage_strides[i - 1]));
  if (cbam_reduction < 1) throw ConfigError("cden: CBAM reduction must be positive");
  if (cbam_kernel < 1 || cbam_kernel % 2 == 0) throw ConfigError("cden: CBAM kernel must be odd");
  for (std::size_t i = 2; i < 5; ++i)
    if (stage_channels[i] < cbam_reduction)
      throw ConfigError("cden: stage " + std::to_string(i + 1) + " has " + std::to_string(stage_channels[i]) +
                        " channels, fewer than the CBAM reduction " + std::to_string(cbam_reduction));
}

DscLayer DscLayer::create(std::int64_t in, std::int64_t out, std::int64_t stride, Rng& rng) {
  DscLayer l;
  l.stride = stride;
  l.dw_weight = make_param({in, 1, 3, 3}, rng, std::sqrt(2.0 / 9.0), true);
  l.dw_bias = make_constant({in}, 0.0, true);
  l.pw_weight = make_param({out, in, 1, 1}, rng, std::sqrt(2.0 / static_cast<double>(in)), true);
  l.pw_bias = make_constant({out}, 0.0, true);
  return l;
}

void DscLayer::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "dw.weight", dw_weight});
  out.push_back({prefix + "dw.bias", dw_bias});
  out.push_back({prefix + "pw.weight", pw_weight});
  out.push_back({prefix + "pw.bias", pw_bias});
}

Tensor dsc_forward(const Tensor& x, const DscLayer& l) {
  return depthwise_separable_conv(x, l.dw_weight, l.pw_weight, ConvSpec::square(3, l.stride, 1, x.size(1)), l.dw_bias,
                                  l.pw_bias);
}

DualBranch DualBranch::create(std::int64_t c, Rng& rng) {
  return {Conv2d::create(c, c, ConvSpec{}, rng, true), Conv2d::create(c, c, ConvSpec::square(3, 1, 1), rng, true),
          Conv2d::create(c, c, ConvSpec{}, rng, true)};
}

void DualBranch::collect(ParamList& out, const std::string& prefix) const {
  local.collect(out, prefix + "local.");
  context.collect(out, prefix + "context.");
  project.collect(out, prefix + "project.");
}

Tensor dual_branch_refine(const Tensor& e, const DualBranch& p) {
  if (e.rank() != 4) throw DimensionError("dual_branch_refine: expected [N, C, H, W], got " + shape_str(e.shape()), 0);
  return conv_forward(gelu(conv_forward(e, p.local) + conv_forward(e, p.context)), p.project);
}

CbamParams CbamParams::create(std::int64_t c, std::int64_t reduction, std::int64_t kernel, Rng& rng) {
  if (c < reduction)
    throw ConfigError("cbam: " + std::to_string(c) + " channels is fewer than the reduction ratio " +
                      std::to_string(reduction));
  const auto hidden = c / reduction;
  CbamParams p;
  p.fc1 = Linear::create(c, hidden, rng, true);
  p.fc2 = Linear::create(hidden, c, rng, true);
  p.spatial = Conv2d::create(2, 1, ConvSpec::square(kernel, 1, kernel / 2), rng, true);
  return p;
}

void CbamParams::collect(ParamList& out, const std::string& prefix) const {
  fc1.collect(out, prefix + "fc1.");
  fc2.collect(out, prefix + "fc2.");
  spatial.collect(out, prefix + "spatial.");
}

Tensor cbam(const Tensor& f, const CbamParams& p) {
  if (f.rank() != 4) throw DimensionError("cbam: expected [N, C, H, W], got " + shape_str(f.shape()), 0);
  const auto n = f.size(0), c = f.size(1);
  if (p.fc1.weight.size(0) != c)
    throw DimensionError("cbam: parameters expect " + std::to_string(p.fc1.weight.size(0)) + " channels, got " +
                             std::to_string(c),
                         1);
  auto mlp = [&](const Tensor& pooled) { return linear(relu(linear(reshape(pooled, {n, c}), p.fc1)), p.fc2); };
  const auto channel_gate = sigmoid(mlp(global_avg_pool(f)) + mlp(global_max_pool(f)));
  const auto fc = f * reshape(channel_gate, {n, c, 1, 1});
  const auto pooled = concat({mean(fc, {1}, true), amax(fc, {1}, true)}, 1);
  return fc * sigmoid(conv_forward(pooled, p.spatial));
}

CdenParams CdenParams::create(const CDENConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto& ch = cfg.stage_channels;
  CdenParams p;
  p.cfg = cfg;
  p.stem = Conv2d::create(cfg.in_channels, ch[0], ConvSpec::square(3, 1, 1), rng, true);
  for (auto& l : p.e1_dsc) l = DscLayer::create(ch[0], ch[0], 1, rng);
  for (std::size_t i = 0; i < 4; ++i) p.down[i] = DscLayer::create(ch[i], ch[i + 1], 2, rng);
  for (std::size_t i = 0; i < 3; ++i) {
    p.refine[i] = DualBranch::create(ch[i + 2], rng);
    p.attention[i] = CbamParams::create(ch[i + 2], cfg.cbam_reduction, cfg.cbam_kernel, rng);
  }
  p.fuse = Conv2d::create(p.fused_channels(), cfg.embed_dim, ConvSpec{}, rng, true);
  return p;
}

std::int64_t CdenParams::fused_channels() const {
  const auto& ch = cfg.stage_channels;
  return ch[0] + (cfg.fuse_e2 ? ch[1] : 0) + ch[2] + ch[3] + ch[4];
}

void CdenParams::collect(ParamList& out, const std::string& prefix) const {
  stem.collect(out, prefix + "stem.");
  for (std::size_t i = 0; i < 2; ++i) e1_dsc[i].collect(out, prefix + "e1.dsc" + std::to_string(i) + ".");
  for (std::size_t i = 0; i < 4; ++i) down[i].collect(out, prefix + "e" + std::to_string(i + 2) + ".down.");
  for (std::size_t i = 0; i < 3; ++i) {
    refine[i].collect(out, prefix + "e" + std::to_string(i + 3) + ".refine.");
    attention[i].collect(out, prefix + "e" + std::to_string(i + 3) + ".cbam.");
  }
  fuse.collect(out, prefix + "fuse.");
}

FeaturePyramid cden_encode(const Tensor& image, const CdenParams& p) {
  if (image.rank() != 4) throw DimensionError("cden_encode: expected [N, C, H, W], got " + shape_str(image.shape()), 0);
  if (image.size(1) != p.cfg.in_channels)
    throw DimensionError("cden_encode: expected " + std::to_string(p.cfg.in_channels) + " input channels", 1);
  const auto s = p.cfg.stage_strides[4];
  for (int axis : {2, 3}) {
    const auto extent = image.size(axis);
    if (extent % s != 0)
      throw ConfigError("cden_encode: " + std::string(axis == 2 ? "height " : "width ") + std::to_string(extent) +
                        " is not divisible by " + std::to_string(s) + "; pad by " +
                        std::to_string(s - extent % s) + " pixels");
  }
  FeaturePyramid pyr;
  pyr.strides = p.cfg.stage_strides;
  auto x = gelu(conv_forward(image, p.stem));
  for (const auto& l : p.e1_dsc) x = gelu(dsc_forward(x, l));
  pyr.stages[0] = x;
  for (std::size_t i = 0; i < 4; ++i) {
    x = gelu(dsc_forward(x, p.down[i]));
    if (i >= 1) x = cbam(dual_branch_refine(x, p.refine[i - 1]), p.attention[i - 1]);
    pyr.stages[i + 1] = x;
  }
  return pyr;
}

Tensor cden_fuse(const FeaturePyramid& pyr, const CdenParams& p) {
  const auto& e1 = pyr[0];
  const auto h = e1.size(2), w = e1.size(3);
  std::vector<Tensor> parts{e1};
  if (p.cfg.fuse_e2) parts.push_back(bilinear_resize(pyr[1], h, w));
  for (std::size_t i = 2; i < 5; ++i) parts.push_back(bilinear_resize(pyr[i], h, w));
  return conv_forward(concat(parts, 1), p.fuse);
}

Tensor fuse_with_encoder(const Tensor& cden_map, const Tensor& tokens, std::int64_t grid_h, std::int64_t grid_w) {
  if (cden_map.rank() != 4)
    throw DimensionError("fuse_with_encoder: map must be [N, D, H, W], got " + shape_str(cden_map.shape()), 0);
  if (tokens.rank() != 3)
    throw DimensionError("fuse_with_encoder: tokens must be [N, hw, D], got " + shape_str(tokens.shape()), 0);
  const auto n = tokens.size(0), d = tokens.size(2);
  if (tokens.size(1) != grid_h * grid_w)
    throw DimensionError("fuse_with_encoder: " + std::to_string(tokens.size(1)) + " tokens do not form a " +
                             std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid",
                         1);
  if (cden_map.size(0) != n) throw DimensionError("fuse_with_encoder: batch sizes differ", 0);
  if (cden_map.size(1) != d)
    throw DimensionError("fuse_with_encoder: map has " + std::to_string(cden_map.size(1)) +
                             " channels but tokens have width " + std::to_string(d),
                         1);
  const auto grid = bilinear_resize(cden_map, grid_h, grid_w);
  return tokens + permute(reshape(grid, {n, d, grid_h * grid_w}), {0, 2, 1});
}

}  // namespace balr
