#pragma once

// Parameter containers shared by the model components. Trainable tensors are
// leaves with requires_grad set; frozen ones are leaves without it.

#include <cstdint>
#include <string>
#include <vector>

#include "balr/ops.hpp"
#include "balr/random.hpp"

namespace balr {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

Tensor make_param(const Shape& shape, Rng& rng, double stddev, bool trainable);
Tensor make_constant(const Shape& shape, double value, bool trainable);

std::int64_t count_scalars(const ParamList& params, bool trainable);

/// y = x W + b with W stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear create(std::int64_t in, std::int64_t out, Rng& rng, bool trainable, bool with_bias = true);
  void collect(ParamList& out, const std::string& prefix) const;
  void set_trainable(bool flag);
};
Tensor linear(const Tensor& x, const Linear& layer);

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  static LayerNormParams create(std::int64_t dim, bool trainable);
  void collect(ParamList& out, const std::string& prefix) const;
  void set_trainable(bool flag);
};
Tensor layer_norm(const Tensor& x, const LayerNormParams& ln);

/// Two-layer GELU MLP.
struct Mlp {
  Linear fc1;
  Linear fc2;

  static Mlp create(std::int64_t dim, std::int64_t hidden, Rng& rng, bool trainable);
  void collect(ParamList& out, const std::string& prefix) const;
  void set_trainable(bool flag);
};
Tensor mlp_forward(const Tensor& x, const Mlp& mlp);

struct Conv2d {
  Tensor weight;
  Tensor bias;
  ConvSpec spec;

  /// He-normal init over fan-in; zero bias.
  static Conv2d create(std::int64_t in, std::int64_t out, const ConvSpec& spec, Rng& rng, bool trainable,
                       bool with_bias = true);
  void collect(ParamList& out, const std::string& prefix) const;
};
Tensor conv_forward(const Tensor& x, const Conv2d& conv);

}  // namespace balr
