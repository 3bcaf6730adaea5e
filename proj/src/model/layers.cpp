#include "balr/layers.hpp"

#include <cmath>

namespace balr {
namespace {

void push(ParamList& out, const std::string& prefix, const char* name, const Tensor& t) {
  if (t.defined()) out.push_back({prefix + name, t});
}

void flag(Tensor& t, bool trainable) {
  if (t.defined()) t.set_requires_grad(trainable);
}

}  // namespace

Tensor make_param(const Shape& shape, Rng& rng, double stddev, bool trainable) {
  auto t = randn(shape, rng, stddev);
  t.set_requires_grad(trainable);
  return t;
}

Tensor make_constant(const Shape& shape, double value, bool trainable) {
  auto t = Tensor::full(shape, value);
  t.set_requires_grad(trainable);
  return t;
}

std::int64_t count_scalars(const ParamList& params, bool trainable) {
  std::int64_t total = 0;
  for (const auto& p : params)
    if (p.tensor.requires_grad() == trainable) total += p.tensor.numel();
  return total;
}

Linear Linear::create(std::int64_t in, std::int64_t out, Rng& rng, bool trainable, bool with_bias) {
  Linear l;
  l.weight = make_param({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)), trainable);
  if (with_bias) l.bias = make_constant({out}, 0.0, trainable);
  return l;
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  push(out, prefix, "weight", weight);
  push(out, prefix, "bias", bias);
}

void Linear::set_trainable(bool f) {
  flag(weight, f);
  flag(bias, f);
}

Tensor linear(const Tensor& x, const Linear& layer) {
  auto y = matmul(x, layer.weight);
  return layer.bias.defined() ? y + layer.bias : y;
}

LayerNormParams LayerNormParams::create(std::int64_t dim, bool trainable) {
  return {make_constant({dim}, 1.0, trainable), make_constant({dim}, 0.0, trainable)};
}

void LayerNormParams::collect(ParamList& out, const std::string& prefix) const {
  push(out, prefix, "gamma", gamma);
  push(out, prefix, "beta", beta);
}

void LayerNormParams::set_trainable(bool f) {
  flag(gamma, f);
  flag(beta, f);
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& ln) { return layer_norm(x, ln.gamma, ln.beta); }

Mlp Mlp::create(std::int64_t dim, std::int64_t hidden, Rng& rng, bool trainable) {
  return {Linear::create(dim, hidden, rng, trainable), Linear::create(hidden, dim, rng, trainable)};
}

void Mlp::collect(ParamList& out, const std::string& prefix) const {
  fc1.collect(out, prefix + "fc1.");
  fc2.collect(out, prefix + "fc2.");
}

void Mlp::set_trainable(bool f) {
  fc1.set_trainable(f);
  fc2.set_trainable(f);
}

Tensor mlp_forward(const Tensor& x, const Mlp& mlp) { return linear(gelu(linear(x, mlp.fc1)), mlp.fc2); }

Conv2d Conv2d::create(std::int64_t in, std::int64_t out, const ConvSpec& spec, Rng& rng, bool trainable,
                      bool with_bias) {
  const auto in_per_group = in / spec.groups;
  const auto fan_in = static_cast<double>(in_per_group * spec.kernel_h * spec.kernel_w);
  Conv2d c;
  c.spec = spec;
  c.weight = make_param({out, in_per_group, spec.kernel_h, spec.kernel_w}, rng, std::sqrt(2.0 / fan_in), trainable);
  if (with_bias) c.bias = make_constant({out}, 0.0, trainable);
  return c;
}

void Conv2d::collect(ParamList& out, const std::string& prefix) const {
  push(out, prefix, "weight", weight);
  push(out, prefix, "bias", bias);
}

Tensor conv_forward(const Tensor& x, const Conv2d& conv) { return conv2d(x, conv.weight, conv.bias, conv.spec); }

}  // namespace balr
