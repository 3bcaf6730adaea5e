#pragma once

// Complementary detail branch: a five-stage convolutional encoder whose
// multi-scale output is projected to the token width and added to the
// image-encoder tokens.
//
//   E1 = DSC(DSC(stem(x)))               full resolution
//   E2 = DSC/2(E1)
//   Ek = CBAM(refine(DSC/2(E(k-1))))     k = 3..5
//   out = conv1x1(concat(E1, up(E3), up(E4), up(E5)))

#include <array>
#include <cstdint>
#include <string>

#include "balr/layers.hpp"

namespace balr {

struct CDENConfig {
  std::int64_t in_channels = 3;
  std::array<std::int64_t, 5> stage_channels{16, 32, 64, 128, 256};
  std::array<std::int64_t, 5> stage_strides{1, 2, 4, 8, 16};
  std::int64_t embed_dim = 256;
  std::int64_t cbam_reduction = 8;
  std::int64_t cbam_kernel = 7;
  bool fuse_e2 = false;

  void validate() const;
};

/// Depthwise 3x3 (optionally strided) followed by a pointwise 1x1, both with bias.
struct DscLayer {
  Tensor dw_weight, dw_bias, pw_weight, pw_bias;
  std::int64_t stride = 1;

  static DscLayer create(std::int64_t in, std::int64_t out, std::int64_t stride, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};
Tensor dsc_forward(const Tensor& x, const DscLayer& layer);

struct DualBranch {
  Conv2d local;    // 1x1
  Conv2d context;  // 3x3
  Conv2d project;  // 1x1

  static DualBranch create(std::int64_t channels, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

/// project(GELU(local(E) + context(E))); shape preserving.
Tensor dual_branch_refine(const Tensor& e, const DualBranch& p);

struct CbamParams {
  Linear fc1;  // C -> C / reduction
  Linear fc2;  // C / reduction -> C
  Conv2d spatial;  // [mean_c, max_c] -> 1, kernel x kernel

  static CbamParams create(std::int64_t channels, std::int64_t reduction, std::int64_t kernel, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Channel gate from avg- and max-pooled descriptors through a shared MLP,
/// then a spatial gate from a conv over channel-wise mean and max.
Tensor cbam(const Tensor& f, const CbamParams& p);

struct FeaturePyramid {
  std::array<Tensor, 5> stages;
  std::array<std::int64_t, 5> strides{};

  const Tensor& operator[](std::size_t i) const { return stages[i]; }
};

struct CdenParams {
  CDENConfig cfg;
  Conv2d stem;
  std::array<DscLayer, 2> e1_dsc;
  std::array<DscLayer, 4> down;  // produce E2..E5
  std::array<DualBranch, 3> refine;
  std::array<CbamParams, 3> attention;
  Conv2d fuse;

  static CdenParams create(const CDENConfig& cfg, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
  std::int64_t fused_channels() const;
};

/// image [N, C_in, H, W] with H and W divisible by the deepest stride.
FeaturePyramid cden_encode(const Tensor& image, const CdenParams& p);

/// [N, embed_dim, H, W] at E1 resolution.
Tensor cden_fuse(const FeaturePyramid& pyramid, const CdenParams& p);

/// Resizes cden_map to the token grid and adds it to tokens [N, gh * gw, D].
Tensor fuse_with_encoder(const Tensor& cden_map, const Tensor& tokens, std::int64_t grid_h, std::int64_t grid_w);

}  // namespace balr
