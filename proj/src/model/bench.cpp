#include "balr/bench.hpp"

#include <chrono>

#include "balr/errors.hpp"
#include "json.hpp"

namespace balr {
namespace {

using u64 = std::uint64_t;

u64 U(std::int64_t v) { return static_cast<u64>(v); }

}  // namespace

const char* mechanism_name(Mechanism m) { return m == Mechanism::Baseline ? "baseline" : "lr-tensor"; }

Mechanism parse_mechanism(const std::string& name) {
  if (name == "baseline") return Mechanism::Baseline;
  if (name == "lr-tensor") return Mechanism::LrTensor;
  throw ConfigError("unknown mechanism '" + name + "' (expected baseline or lr-tensor)");
}

BaselineFlops analytic_flops_baseline(std::int64_t n_q, std::int64_t n_kv, std::int64_t d, std::int64_t heads) {
  const u64 nq = U(n_q), nk = U(n_kv), dd = U(d), h = U(heads);
  BaselineFlops f;
  f.score_term = 2 * nq * nk * dd + 4 * h * nq * nk + 2 * nq * nk * dd;
  f.total = 2 * nq * dd * dd + nq * dd + 4 * nk * dd * dd + f.score_term + 2 * nq * dd * dd;
  return f;
}

u64 analytic_flops_lr(std::int64_t n_q, std::int64_t n_kv, const TensorAttnConfig& cfg) {
  const u64 nq = U(n_q), nk = U(n_kv), d = U(cfg.d);
  const u64 rq = U(cfg.rank_q), rk = U(cfg.rank_k), rv = U(cfg.rank_v);
  u64 f = 0;
  f += 2 * nq * d * d + 4 * nk * d * d;             // frozen Q, K, V
  f += 2 * nq * d * rq + 2 * nk * d * (rk + rv);    // factor maps
  if (cfg.rope_enabled) f += 3 * nq * rq + 3 * nk * rk;
  f += 2 * d * rq * rk + rq * rk;                   // G
  f += 2 * nq * rq * rk + nq * rk;                  // u
  f += nk * rk + 2 * nk * rk * rv + nk * rk;        // phi(A_K), C, z
  f += 2 * nq * rk * rv + 2 * nq * rk + 2 * nq * rv;  // numerator, normalizer, ratio
  f += 2 * nq * rv * d + 2 * nq * d * d;            // B_V, W_o
  return f;
}

std::string BenchReport::to_json() const {
  nlohmann::ordered_json j;
  j["mechanism"] = mechanism_name(mechanism);
  j["n"] = n;
  j["d"] = d;
  j["heads"] = heads;
  j["ranks"] = {rank_q, rank_k, rank_v};
  j["flops_analytic"] = flops_analytic;
  j["flops_measured"] = flops_measured ? nlohmann::ordered_json(*flops_measured) : nullptr;
  j["score_flops_analytic"] = score_flops_analytic;
  j["score_flops_measured"] = score_flops_measured ? nlohmann::ordered_json(*score_flops_measured) : nullptr;
  j["peak_bytes"] = peak_bytes ? nlohmann::ordered_json(*peak_bytes) : nullptr;
  j["wall_ms"] = wall_ms;
  j["seed"] = seed;
  j["instrumented"] = instrumented();
  return j.dump(2);
}

BenchReport bench_attention(Mechanism mechanism, std::int64_t n, std::int64_t d, std::int64_t heads,
                            const TensorAttnConfig& ranks, std::uint64_t seed, const BenchOptions& options) {
  if (n < 1 || d < 1) throw ConfigError("bench: n and d must be >= 1");
  TensorAttnConfig cfg = ranks;
  cfg.d = d;
  BenchReport r;
  r.mechanism = mechanism;
  r.n = n;
  r.d = d;
  r.heads = heads;
  r.seed = seed;
  r.rank_q = cfg.rank_q;
  r.rank_k = cfg.rank_k;
  r.rank_v = cfg.rank_v;

  auto xr = Rng::substream(seed, "bench.input");
  const auto x = randn({1, n, d}, xr);
  auto wr = Rng::substream(seed, "bench.weights");
  MhsaWeights base;
  LrAttentionWeights lr;
  if (mechanism == Mechanism::Baseline) {
    base = MhsaWeights::create(d, heads, wr, true);
    const auto a = analytic_flops_baseline(n, n, d, heads);
    r.flops_analytic = a.total;
    r.score_flops_analytic = a.score_term;
  } else {
    cfg.validate();
    lr = LrAttentionWeights::from_base(MhsaWeights::create(d, 1, wr, false), cfg, wr);
    r.flops_analytic = analytic_flops_lr(n, n, cfg);
  }

  const bool counting = instrument::enabled();
  const auto allocations_before = instrument::memory_stats().allocations;
  instrument::reset_flops();
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t peak = 0;
  {
    instrument::MemoryScope scope;
    {
      auto out = mechanism == Mechanism::Baseline ? mhsa_baseline_forward(x, base) : lr_attention_layer(x, lr);
      r.flops_measured = instrument::flops_total();
      r.score_flops_measured = instrument::flops_for("scores");
      if (options.backward) sum(out).backward();
    }
    peak = scope.peak_bytes();
  }
  r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  if (counting && *r.flops_measured > 0) {
    if (mechanism == Mechanism::LrTensor) r.score_flops_measured.reset();
  } else {
    r.flops_measured.reset();
    r.score_flops_measured.reset();
  }
  if (counting && instrument::memory_stats().allocations > allocations_before && peak > 0) r.peak_bytes = peak;
  return r;
}

std::optional<double> ComplexityReport::memory_ratio() const {
  if (!baseline.peak_bytes || !lr_tensor.peak_bytes || *baseline.peak_bytes == 0) return std::nullopt;
  return static_cast<double>(*lr_tensor.peak_bytes) / static_cast<double>(*baseline.peak_bytes);
}

ComplexityReport complexity_report(std::int64_t n, std::int64_t d, std::int64_t heads, const TensorAttnConfig& cfg,
                                   std::uint64_t seed, const BenchOptions& options) {
  return {bench_attention(Mechanism::Baseline, n, d, heads, cfg, seed, options),
          bench_attention(Mechanism::LrTensor, n, d, heads, cfg, seed, options)};
}

}  // namespace balr
