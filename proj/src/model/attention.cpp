#include "balr/attention.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>

#include "balr/errors.hpp"

namespace balr {
namespace {

std::atomic<bool> g_prefactor_fault{false};

double inv_rank(std::int64_t r) {
  return 1.0 / static_cast<double>(hooks::rank_prefactor_fault() ? r + 1 : r);
}

void require_last(const Tensor& t, std::int64_t extent, const char* what) {
  if (t.rank() < 2 || t.size(-1) != extent)
    throw DimensionError(std::string(what) + ": expected last axis " + std::to_string(extent) + ", got " +
                             shape_str(t.shape()),
                         static_cast<int>(t.rank()) - 1);
}

void require_factor(const Tensor& b, std::int64_t d, std::int64_t rank, const char* what) {
  if (b.rank() != 2 || b.size(0) != d || b.size(1) != rank)
    throw DimensionError(std::string(what) + ": expected [" + std::to_string(d) + ", " + std::to_string(rank) +
                             "], got " + shape_str(b.shape()),
                         b.rank() == 2 && b.size(0) == d ? 1 : 0);
}

Shape leading(const Tensor& t) { return Shape(t.shape().begin(), t.shape().end() - 2); }

/// [B, n, d] -> [B, heads, n, d / heads]
Tensor split_heads(const Tensor& x, std::int64_t heads) {
  const auto b = x.size(0), n = x.size(1), d = x.size(2);
  return permute(reshape(x, {b, n, heads, d / heads}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  const auto b = x.size(0), h = x.size(1), n = x.size(2), dh = x.size(3);
  return reshape(permute(x, {0, 2, 1, 3}), {b, n, h * dh});
}

}  // namespace

namespace hooks {
void set_rank_prefactor_fault(bool enabled) noexcept { g_prefactor_fault.store(enabled); }
bool rank_prefactor_fault() noexcept { return g_prefactor_fault.load(); }
}  // namespace hooks

void TensorAttnConfig::validate() const {
  if (d < 1) throw ConfigError("attention: d must be positive, got " + std::to_string(d));
  for (auto [name, r] : {std::pair{"R_Q", rank_q}, {"R_K", rank_k}, {"R_V", rank_v}})
    if (r < 1 || r > d)
      throw ConfigError(std::string("attention: ") + name + " = " + std::to_string(r) + " must lie in [1, d = " +
                        std::to_string(d) + "]");
  if (rope_enabled)
    for (auto [name, r] : {std::pair{"R_Q", rank_q}, {"R_K", rank_k}})
      if (r % 2 != 0)
        throw ConfigError(std::string("attention: RoPE pairs rank dimensions, so ") + name + " = " +
                          std::to_string(r) + " must be even; use " + std::to_string(r + 1) + " or disable RoPE");
}

MhsaWeights MhsaWeights::create(std::int64_t d, std::int64_t heads, Rng& rng, bool trainable) {
  if (heads < 1 || d % heads != 0)
    throw ConfigError("attention: d = " + std::to_string(d) + " is not divisible by heads = " + std::to_string(heads));
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  MhsaWeights w;
  w.w_q = make_param({d, d}, rng, sd, trainable);
  w.w_k = make_param({d, d}, rng, sd, trainable);
  w.w_v = make_param({d, d}, rng, sd, trainable);
  w.w_o = make_param({d, d}, rng, sd, trainable);
  w.heads = heads;
  return w;
}

void MhsaWeights::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "w_q", w_q});
  out.push_back({prefix + "w_k", w_k});
  out.push_back({prefix + "w_v", w_v});
  out.push_back({prefix + "w_o", w_o});
}

void MhsaWeights::set_trainable(bool flag) {
  w_q.set_requires_grad(flag);
  w_k.set_requires_grad(flag);
  w_v.set_requires_grad(flag);
  w_o.set_requires_grad(flag);
}

Tensor mhsa_baseline_forward(const Tensor& x, const MhsaWeights& w) { return mhsa_forward(x, x, w); }

Tensor mhsa_forward(const Tensor& x_q, const Tensor& x_kv, const MhsaWeights& w) {
  const auto d = w.dim();
  if (w.heads < 1 || d % w.heads != 0)
    throw ConfigError("attention: d = " + std::to_string(d) + " is not divisible by heads = " +
                      std::to_string(w.heads));
  require_last(x_q, d, "mhsa queries");
  require_last(x_kv, d, "mhsa keys");
  if (x_q.rank() == 2) {
    auto out = mhsa_forward(reshape(x_q, {1, x_q.size(0), d}), reshape(x_kv, {1, x_kv.size(0), d}), w);
    return reshape(out, {x_q.size(0), d});
  }
  if (x_q.rank() != 3 || x_kv.rank() != 3 || x_q.size(0) != x_kv.size(0))
    throw DimensionError("mhsa: expected [B, n, d] inputs with equal batch, got " + shape_str(x_q.shape()) + " and " +
                             shape_str(x_kv.shape()),
                         0);
  const double scale_q = 1.0 / std::sqrt(static_cast<double>(d / w.heads));
  auto q = split_heads(scale(matmul(x_q, w.w_q), scale_q), w.heads);
  auto k = split_heads(matmul(x_kv, w.w_k), w.heads);
  auto v = split_heads(matmul(x_kv, w.w_v), w.heads);
  Tensor ctx;
  {
    instrument::FlopRegion region("scores");
    ctx = matmul(softmax(matmul(q, k, Trans::No, Trans::Yes)), v);
  }
  return matmul(merge_heads(ctx), w.w_o);
}

LrAttentionWeights LrAttentionWeights::create(const TensorAttnConfig& cfg, Rng& rng) {
  cfg.validate();
  return from_base(MhsaWeights::create(cfg.d, 1, rng, false), cfg, rng);
}

LrAttentionWeights LrAttentionWeights::from_base(const MhsaWeights& base, const TensorAttnConfig& cfg, Rng& rng) {
  cfg.validate();
  if (base.dim() != cfg.d)
    throw ConfigError("attention: frozen projections have width " + std::to_string(base.dim()) + ", config says " +
                      std::to_string(cfg.d));
  const double d = static_cast<double>(cfg.d);
  LrAttentionWeights w;
  w.base = base;
  w.base.set_trainable(false);
  w.cfg = cfg;
  w.p_q = make_param({cfg.d, cfg.rank_q}, rng, 1.0 / std::sqrt(d), true);
  w.p_k = make_param({cfg.d, cfg.rank_k}, rng, 1.0 / std::sqrt(d), true);
  w.p_v = make_param({cfg.d, cfg.rank_v}, rng, 1.0 / std::sqrt(d), true);
  w.b_q = make_param({cfg.d, cfg.rank_q}, rng, static_cast<double>(cfg.rank_q) / std::sqrt(d), true);
  w.b_k = make_param({cfg.d, cfg.rank_k}, rng, static_cast<double>(cfg.rank_k) / std::sqrt(d), true);
  w.b_v = make_param({cfg.d, cfg.rank_v}, rng, static_cast<double>(cfg.rank_v) / std::sqrt(d), true);
  return w;
}

void LrAttentionWeights::collect(ParamList& out, const std::string& prefix) const {
  base.collect(out, prefix);
  out.push_back({prefix + "p_q", p_q});
  out.push_back({prefix + "p_k", p_k});
  out.push_back({prefix + "p_v", p_v});
  out.push_back({prefix + "b_q", b_q});
  out.push_back({prefix + "b_k", b_k});
  out.push_back({prefix + "b_v", b_v});
}

QKVFactorSet factorize_qkv(const Tensor& x, const LrAttentionWeights& w) { return factorize_qkv(x, x, w); }

QKVFactorSet factorize_qkv(const Tensor& x_q, const Tensor& x_kv, const LrAttentionWeights& w) {
  const auto& c = w.cfg;
  c.validate();
  require_last(x_q, c.d, "factorize_qkv queries");
  require_last(x_kv, c.d, "factorize_qkv keys");
  require_factor(w.p_q, c.d, c.rank_q, "P_Q");
  require_factor(w.p_k, c.d, c.rank_k, "P_K");
  require_factor(w.p_v, c.d, c.rank_v, "P_V");
  require_factor(w.b_q, c.d, c.rank_q, "B_Q");
  require_factor(w.b_k, c.d, c.rank_k, "B_K");
  require_factor(w.b_v, c.d, c.rank_v, "B_V");
  QKVFactorSet f;
  f.a_q = matmul(matmul(x_q, w.base.w_q), w.p_q);
  f.a_k = matmul(matmul(x_kv, w.base.w_k), w.p_k);
  f.a_v = matmul(matmul(x_kv, w.base.w_v), w.p_v);
  f.b_q = w.b_q;
  f.b_k = w.b_k;
  f.b_v = w.b_v;
  return f;
}

Tensor reconstruct(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.size(-1) != b.size(1))
    throw DimensionError("reconstruct: factors " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                             " disagree on rank",
                         -1);
  return scale(matmul(a, b, Trans::No, Trans::Yes), inv_rank(a.size(-1)));
}

RotaryTable RotaryTable::sequential(std::int64_t n, std::int64_t rank, double base) {
  std::vector<std::int64_t> positions(static_cast<std::size_t>(std::max<std::int64_t>(n, 0)));
  for (std::int64_t t = 0; t < n; ++t) positions[static_cast<std::size_t>(t)] = t;
  return at_positions(std::move(positions), rank, base);
}

RotaryTable RotaryTable::at_positions(std::vector<std::int64_t> positions, std::int64_t rank, double base) {
  if (rank < 2 || rank % 2 != 0)
    throw ConfigError("RoPE: rank " + std::to_string(rank) + " must be even and >= 2; adjust the rank to " +
                      std::to_string(rank < 2 ? 2 : rank + 1));
  if (!(base > 1.0)) throw ConfigError("RoPE: base must exceed 1");
  RotaryTable t;
  t.positions = std::move(positions);
  t.rank = rank;
  t.base = base;
  const auto half = rank / 2;
  t.cos.resize(t.positions.size() * static_cast<std::size_t>(half));
  t.sin.resize(t.cos.size());
  for (std::size_t p = 0; p < t.positions.size(); ++p)
    for (std::int64_t j = 0; j < half; ++j) {
      const double theta = static_cast<double>(t.positions[p]) *
                           std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(rank));
      t.cos[p * static_cast<std::size_t>(half) + static_cast<std::size_t>(j)] = std::cos(theta);
      t.sin[p * static_cast<std::size_t>(half) + static_cast<std::size_t>(j)] = std::sin(theta);
    }
  return t;
}

Tensor apply_rope(const Tensor& a, const RotaryTable& table) {
  if (a.rank() < 2) throw DimensionError("apply_rope: expected [.., n, R], got " + shape_str(a.shape()), 0);
  const auto n = a.size(-2), r = a.size(-1);
  if (r != table.rank)
    throw DimensionError("apply_rope: factor rank " + std::to_string(r) + " but table rank " +
                             std::to_string(table.rank),
                         static_cast<int>(a.rank()) - 1);
  if (static_cast<std::size_t>(n) != table.positions.size())
    throw DimensionError("apply_rope: " + std::to_string(n) + " tokens but table has " +
                             std::to_string(table.positions.size()) + " positions",
                         static_cast<int>(a.rank()) - 2);
  const auto half = r / 2;
  auto cs = std::make_shared<const std::vector<double>>(table.cos);
  auto sn = std::make_shared<const std::vector<double>>(table.sin);
  // sign = +1 rotates forward, -1 applies the transpose (inverse) rotation.
  auto rotate = [n, half, cs, sn](const double* src, double* dst, std::size_t rows, double sign) {
    for (std::size_t row = 0; row < rows; ++row) {
      const std::size_t t = row % static_cast<std::size_t>(n);
      const double* c = cs->data() + t * static_cast<std::size_t>(half);
      const double* s = sn->data() + t * static_cast<std::size_t>(half);
      const double* x = src + row * static_cast<std::size_t>(2 * half);
      double* y = dst + row * static_cast<std::size_t>(2 * half);
      for (std::int64_t j = 0; j < half; ++j) {
        const double u = x[2 * j], v = x[2 * j + 1];
        y[2 * j] = u * c[j] - sign * v * s[j];
        y[2 * j + 1] = sign * u * s[j] + v * c[j];
      }
    }
  };
  const auto rows = static_cast<std::size_t>(a.numel() / r);
  Buffer out(static_cast<std::size_t>(a.numel()));
  rotate(a.data().data(), out.data(), rows, 1.0);
  instrument::add_flops(static_cast<std::uint64_t>(3 * a.numel()));
  return autograd::make_output(
      a.shape(), std::move(out), {a},
      [rotate, rows](Buffer g, const std::vector<bool>&) {
        Buffer gi(g.size());
        rotate(g.data(), gi.data(), rows, -1.0);
        return std::vector<Buffer>{std::move(gi)};
      },
      "rope");
}

Tensor lr_attention_forward(const QKVFactorSet& f, const TensorAttnConfig& cfg) {
  cfg.validate();
  require_factor(f.b_q, cfg.d, cfg.rank_q, "B_Q");
  require_factor(f.b_k, cfg.d, cfg.rank_k, "B_K");
  require_factor(f.b_v, cfg.d, cfg.rank_v, "B_V");
  require_last(f.a_q, cfg.rank_q, "A_Q");
  require_last(f.a_k, cfg.rank_k, "A_K");
  require_last(f.a_v, cfg.rank_v, "A_V");
  if (f.a_k.size(-2) != f.a_v.size(-2))
    throw DimensionError("lr_attention: A_K and A_V cover different token counts", static_cast<int>(f.a_k.rank()) - 2);
  if (leading(f.a_q) != leading(f.a_k) || leading(f.a_k) != leading(f.a_v))
    throw DimensionError("lr_attention: factor batch shapes differ", 0);

  const auto g = scale(matmul(f.b_q, f.b_k, Trans::Yes), inv_rank(cfg.rank_q) * inv_rank(cfg.rank_k));
  const auto u = elu_plus_one(matmul(f.a_q, g));
  Tensor ratio;
  {
    const auto kf = elu_plus_one(f.a_k);
    const auto c = matmul(kf, f.a_v, Trans::Yes);
    const auto z = sum(kf, {-2}, true);
    const auto den = sum(u * z, {-1}, true);
    const auto dd = den.data();
    if (*std::min_element(dd.begin(), dd.end()) < 1e-30)
      throw NumericError("lr_attention: normalizer u.z below 1e-30 (degenerate features)");
    ratio = scale(matmul(u, c) / den, inv_rank(cfg.rank_v));
  }
  return matmul(ratio, f.b_v, Trans::No, Trans::Yes);
}

Tensor lr_attention_layer(const Tensor& x, const LrAttentionWeights& w) {
  auto f = factorize_qkv(x, w);
  if (w.cfg.rope_enabled) {
    const auto n = x.size(-2);
    f.a_q = apply_rope(f.a_q, RotaryTable::sequential(n, w.cfg.rank_q, w.cfg.rope_base));
    f.a_k = apply_rope(f.a_k, RotaryTable::sequential(n, w.cfg.rank_k, w.cfg.rope_base));
  }
  return matmul(lr_attention_forward(f, w.cfg), w.base.w_o);
}

Tensor lr_cross_attention_layer(const Tensor& x_q, const Tensor& x_kv, const LrAttentionWeights& w) {
  return matmul(lr_attention_forward(factorize_qkv(x_q, x_kv, w), w.cfg), w.base.w_o);
}

}  // namespace balr
