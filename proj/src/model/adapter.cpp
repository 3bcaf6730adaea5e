#include "balr/adapter.hpp"

#include <algorithm>

#include "balr/errors.hpp"

namespace balr {

LowRankLinear LowRankLinear::create(std::int64_t out, std::int64_t in, std::int64_t rank, Rng& rng, double stddev,
                                    bool trainable) {
  if (rank < 1 || rank > std::min(out, in))
    throw ConfigError("low-rank linear: rank " + std::to_string(rank) + " outside [1, min(" + std::to_string(out) +
                      ", " + std::to_string(in) + ")]");
  LowRankLinear l;
  l.u = make_param({out, rank}, rng, stddev, trainable);
  l.v = make_param({in, rank}, rng, stddev, trainable);
  return l;
}

void LowRankLinear::validate() const {
  if (!u.defined() || !v.defined()) throw ConfigError("low-rank linear: factors not initialized");
  if (u.rank() != 2) throw DimensionError("low-rank linear: U must be 2-D, got " + shape_str(u.shape()), 0);
  if (v.rank() != 2) throw DimensionError("low-rank linear: V must be 2-D, got " + shape_str(v.shape()), 0);
  if (u.size(1) != v.size(1))
    throw DimensionError("low-rank linear: U " + shape_str(u.shape()) + " and V " + shape_str(v.shape()) +
                             " disagree on rank",
                         1);
  if (rank() > std::min(out_features(), in_features()))
    throw ConfigError("low-rank linear: rank " + std::to_string(rank()) + " exceeds min(m, n)");
}

void LowRankLinear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "U", u});
  out.push_back({prefix + "V", v});
}

Tensor lowrank_apply(const Tensor& x, const LowRankLinear& lin) {
  lin.validate();
  if (x.rank() < 1 || x.size(-1) != lin.in_features())
    throw DimensionError("lowrank_apply: last axis of " + shape_str(x.shape()) + " must be " +
                             std::to_string(lin.in_features()),
                         static_cast<int>(x.rank()) - 1);
  if (x.rank() == 1) return reshape(lowrank_apply(reshape(x, {1, x.size(0)}), lin), {lin.out_features()});
  return matmul(matmul(x, lin.v), lin.u, Trans::No, Trans::Yes);
}

LowRankAdapter LowRankAdapter::create(std::int64_t dim, std::int64_t rank, Rng& rng, double s_init) {
  if (rank < 1 || rank > dim)
    throw ConfigError("adapter: rank " + std::to_string(rank) + " outside [1, " + std::to_string(dim) + "]");
  LowRankAdapter a;
  a.down.u = make_param({rank, rank}, rng, 0.02, true);
  a.down.v = make_param({dim, rank}, rng, 0.02, true);
  a.up.u = make_constant({dim, rank}, 0.0, true);
  a.up.v = make_param({rank, rank}, rng, 0.02, true);
  a.s = make_constant({}, s_init, true);
  return a;
}

void LowRankAdapter::validate() const {
  down.validate();
  up.validate();
  if (down.out_features() != up.in_features())
    throw DimensionError("adapter: down projection emits " + std::to_string(down.out_features()) +
                             " features but up projection expects " + std::to_string(up.in_features()),
                         -1);
  if (up.out_features() != down.in_features())
    throw DimensionError("adapter: up projection must return to width " + std::to_string(down.in_features()), -1);
  if (!s.defined() || s.numel() != 1) throw ConfigError("adapter: scale s must be a single scalar");
}

void LowRankAdapter::collect(ParamList& out, const std::string& prefix) const {
  down.collect(out, prefix + "down.");
  up.collect(out, prefix + "up.");
  out.push_back({prefix + "s", s});
}

std::int64_t LowRankAdapter::parameter_count() const {
  return down.u.numel() + down.v.numel() + up.u.numel() + up.v.numel() + s.numel();
}

Tensor adapter_forward(const Tensor& x, const LowRankAdapter& a) {
  a.validate();
  if (x.rank() < 1 || x.size(-1) != a.dim())
    throw DimensionError("adapter_forward: last axis of " + shape_str(x.shape()) + " must be " +
                             std::to_string(a.dim()),
                         static_cast<int>(x.rank()) - 1);
  return lowrank_apply(gelu(lowrank_apply(x, a.down)), a.up) * a.s;
}

AdapterParamCount adapter_param_count(std::int64_t m, std::int64_t n, std::int64_t r) {
  if (m < 1 || n < 1 || r < 1) throw ConfigError("adapter_param_count: m, n and r must be positive");
  AdapterParamCount c;
  c.lowrank = (m + n) * r;
  c.fullrank = m * n;
  c.reduction = 1.0 - static_cast<double>(c.lowrank) / static_cast<double>(c.fullrank);
  return c;
}

const char* site_name(AdapterSite site) {
  return site == AdapterSite::PostAttention ? "post_attention" : "mlp_residual";
}

}  // namespace balr
