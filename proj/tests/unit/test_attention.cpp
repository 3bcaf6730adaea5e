#include <algorithm>
#include <cmath>
#include <numeric>

#include "balr/attention.hpp"
#include "balr/bench.hpp"
#include "balr/errors.hpp"
#include "balr/grad_check.hpp"
#include "balr/reference.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace balr;
using balr::testing::max_abs_diff;
using balr::testing::probe;

namespace {

struct Factors {
  QKVFactorSet f;
  TensorAttnConfig cfg;
};

Factors random_factors(Rng& rng, std::int64_t n_q, std::int64_t n_kv, std::int64_t d, std::int64_t rq,
                       std::int64_t rk, std::int64_t rv) {
  Factors out;
  out.cfg.d = d;
  out.cfg.rank_q = rq;
  out.cfg.rank_k = rk;
  out.cfg.rank_v = rv;
  out.cfg.rope_enabled = false;
  out.f.a_q = randn({n_q, rq}, rng);
  out.f.a_k = randn({n_kv, rk}, rng);
  out.f.a_v = randn({n_kv, rv}, rng);
  out.f.b_q = randn({d, rq}, rng);
  out.f.b_k = randn({d, rk}, rng);
  out.f.b_v = randn({d, rv}, rng);
  return out;
}

std::vector<double> row(const Tensor& t, std::int64_t i) {
  const auto w = t.size(-1);
  return {t.data().begin() + i * w, t.data().begin() + (i + 1) * w};
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

Tensor rope_one(const std::vector<double>& v, std::int64_t position) {
  const auto r = static_cast<std::int64_t>(v.size());
  return apply_rope(Tensor::from_vector({1, r}, v), RotaryTable::at_positions({position}, r));
}

}  // namespace

TEST_CASE("TensorAttnConfig validation") {
  TensorAttnConfig c;
  c.d = 16;
  CHECK_NOTHROW(c.validate());
  c.rank_q = 17;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.rank_q = 7;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.rope_enabled = false;
  CHECK_NOTHROW(c.validate());
  c.rank_v = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("factorize_qkv") {
  Rng rng(1);
  SUBCASE("rank-1 factors reconstruct a rank <= 1 matrix") {
    TensorAttnConfig cfg{.d = 6, .rank_q = 1, .rank_k = 1, .rank_v = 1, .rope_enabled = false};
    auto w = LrAttentionWeights::create(cfg, rng);
    auto f = factorize_qkv(randn({5, 6}, rng), w);
    auto m = reconstruct(f.a_q, f.b_q);
    double worst = 0;
    for (std::int64_t i = 0; i < 5; ++i)
      for (std::int64_t j = 0; j < 5; ++j)
        for (std::int64_t k = 0; k < 6; ++k)
          for (std::int64_t l = 0; l < 6; ++l)
            worst = std::max(worst, std::abs(m.at({i, k}) * m.at({j, l}) - m.at({i, l}) * m.at({j, k})));
    CHECK(worst < 1e-12);
  }
  SUBCASE("reconstruction equals the per-token sum of rank-1 outer products") {
    TensorAttnConfig cfg{.d = 12, .rank_q = 4, .rank_k = 6, .rank_v = 3, .rope_enabled = false};
    auto w = LrAttentionWeights::create(cfg, rng);
    auto f = factorize_qkv(randn({7, 12}, rng), w);
    CHECK(max_abs_diff(reconstruct(f.a_q, f.b_q), reference::reconstruct_sum(f.a_q, f.b_q)) < 1e-12);
    CHECK(max_abs_diff(reconstruct(f.a_k, f.b_k), reference::reconstruct_sum(f.a_k, f.b_k)) < 1e-12);
    CHECK(max_abs_diff(reconstruct(f.a_v, f.b_v), reference::reconstruct_sum(f.a_v, f.b_v)) < 1e-12);
  }
  SUBCASE("gradients reach P and B but never the frozen projections") {
    TensorAttnConfig cfg{.d = 6, .rank_q = 2, .rank_k = 4, .rank_v = 2, .rope_enabled = false};
    auto w = LrAttentionWeights::create(cfg, rng);
    auto x = randn({4, 6}, rng);
    auto loss = [&] {
      auto f = factorize_qkv(x, w);
      return probe(reconstruct(f.a_q, f.b_q), 1) + probe(reconstruct(f.a_k, f.b_k), 2) +
             probe(reconstruct(f.a_v, f.b_v), 3);
    };
    auto res = grad_check_params(loss, {w.p_q, w.p_k, w.p_v, w.b_q, w.b_k, w.b_v}, 1e-6);
    CHECK(res.max_rel_error < 1e-6);
    loss().backward();
    CHECK_FALSE(w.base.w_q.has_grad());
    CHECK_FALSE(w.base.w_k.has_grad());
    CHECK_FALSE(w.base.w_v.has_grad());
    CHECK(w.p_q.has_grad());
  }
  SUBCASE("shape errors") {
    TensorAttnConfig cfg{.d = 6, .rank_q = 2, .rank_k = 2, .rank_v = 2, .rope_enabled = false};
    auto w = LrAttentionWeights::create(cfg, rng);
    CHECK_THROWS_AS(factorize_qkv(randn({4, 5}, rng), w), DimensionError);
  }
}

TEST_CASE("prefactor fault hook changes the reconstruction") {
  Rng rng(2);
  auto a = randn({3, 4}, rng);
  auto b = randn({5, 4}, rng);
  hooks::set_rank_prefactor_fault(true);
  const double err = max_abs_diff(reconstruct(a, b), reference::reconstruct_sum(a, b));
  hooks::set_rank_prefactor_fault(false);
  CHECK(err > 1e-3);
  CHECK(max_abs_diff(reconstruct(a, b), reference::reconstruct_sum(a, b)) < 1e-12);
}

TEST_CASE("apply_rope") {
  Rng rng(3);
  SUBCASE("position 0 is the identity") {
    auto a = randn({1, 8}, rng);
    CHECK(max_abs_diff(apply_rope(a, RotaryTable::at_positions({0}, 8)), a) == 0.0);
  }
  SUBCASE("row norms are preserved") {
    auto a = randn({64, 8}, rng, 3.0);
    auto r = apply_rope(a, RotaryTable::sequential(64, 8));
    for (std::int64_t t = 0; t < 64; ++t) {
      const auto x = row(a, t), y = row(r, t);
      CHECK(std::abs(std::sqrt(dot(x, x)) - std::sqrt(dot(y, y))) < 1e-12);
    }
  }
  SUBCASE("matches the pairwise rotation oracle") {
    auto a = randn({20, 6}, rng);
    auto r = apply_rope(a, RotaryTable::sequential(20, 6));
    for (std::int64_t t = 0; t < 20; ++t) CHECK(max_abs_diff(row(r, t), reference::rope_row(row(a, t), t)) < 1e-14);
  }
  SUBCASE("inner products depend only on the offset") {
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
      const auto q = row(randn({1, 8}, rng), 0), k = row(randn({1, 8}, rng), 0);
      for (std::int64_t t = 0; t <= 40; ++t)
        for (std::int64_t s = std::max<std::int64_t>(0, t - 16); s <= t + 16; ++s) {
          const double lhs = dot(row(rope_one(q, t), 0), row(rope_one(k, s), 0));
          const double rhs = dot(row(rope_one(q, t - s), 0), k);
          worst = std::max(worst, std::abs(lhs - rhs));
        }
    }
    CHECK(worst < 1e-10);
  }
  SUBCASE("batched input reuses positions per batch entry") {
    auto a = randn({3, 5, 4}, rng);
    auto r = apply_rope(a, RotaryTable::sequential(5, 4));
    auto first = apply_rope(reshape(Tensor::from_vector({5, 4}, row(reshape(a, {3, 20}), 2)), {5, 4}),
                            RotaryTable::sequential(5, 4));
    CHECK(max_abs_diff(row(reshape(r, {3, 20}), 2), first.data()) == 0.0);
  }
  SUBCASE("gradient") {
    auto table = RotaryTable::sequential(6, 4);
    CHECK(grad_check([&](const Tensor& x) { return probe(apply_rope(x, table)); }, randn({2, 6, 4}, rng), 1e-6) < 1e-8);
  }
  SUBCASE("odd rank and length mismatch") {
    CHECK_THROWS_AS(RotaryTable::sequential(4, 5), ConfigError);
    CHECK_THROWS_AS(apply_rope(randn({3, 4}, rng), RotaryTable::sequential(4, 4)), DimensionError);
    CHECK_THROWS_AS(apply_rope(randn({4, 6}, rng), RotaryTable::sequential(4, 4)), DimensionError);
  }
}

TEST_CASE("lr_attention_forward") {
  Rng rng(4);
  SUBCASE("a single token returns its reconstructed value row") {
    auto fx = random_factors(rng, 1, 1, 10, 4, 4, 6);
    auto out = lr_attention_forward(fx.f, fx.cfg);
    const auto v = reference::reconstruct_sum(fx.f.a_v, fx.f.b_v);
    for (std::size_t c = 0; c < v.size(); ++c) CHECK(out.data()[c] == doctest::Approx(v[c]).epsilon(1e-14));
  }
  SUBCASE("equals the dense-weights oracle over 100 random instances") {
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto n = rng.integer(1, 32), m = trial % 2 ? n : rng.integer(1, 32);
      auto fx = random_factors(rng, n, m, rng.integer(4, 16), rng.integer(1, 4), rng.integer(1, 4), rng.integer(1, 4));
      auto out = lr_attention_forward(fx.f, fx.cfg);
      const auto dense = reference::factored_attention_dense(fx.f.a_q, fx.f.a_k, fx.f.a_v, fx.f.b_q, fx.f.b_k, fx.f.b_v);
      worst = std::max(worst, max_abs_diff(out, dense.output));
    }
    CHECK(worst < 1e-10);
  }
  SUBCASE("outputs lie within the per-channel range of the value rows") {
    auto fx = random_factors(rng, 16, 16, 8, 4, 4, 4);
    auto out = lr_attention_forward(fx.f, fx.cfg);
    const auto v = reference::reconstruct_sum(fx.f.a_v, fx.f.b_v);
    for (std::int64_t c = 0; c < 8; ++c) {
      double lo = INFINITY, hi = -INFINITY;
      for (std::int64_t s = 0; s < 16; ++s) {
        lo = std::min(lo, v[static_cast<std::size_t>(s * 8 + c)]);
        hi = std::max(hi, v[static_cast<std::size_t>(s * 8 + c)]);
      }
      for (std::int64_t t = 0; t < 16; ++t) {
        CHECK(out.at({t, c}) >= lo - 1e-12);
        CHECK(out.at({t, c}) <= hi + 1e-12);
      }
    }
  }
  SUBCASE("no n x n allocation in forward or backward") {
    const std::int64_t n = 32;
    auto fx = random_factors(rng, n, n, 16, 4, 4, 4);
    for (auto* t : {&fx.f.a_q, &fx.f.a_k, &fx.f.a_v, &fx.f.b_q, &fx.f.b_k, &fx.f.b_v}) t->set_requires_grad(true);
    instrument::MemoryScope scope;
    probe(lr_attention_forward(fx.f, fx.cfg)).backward();
    CHECK(scope.largest_allocation() < n * n * sizeof(double));
  }
  SUBCASE("without RoPE, permuting tokens permutes output rows") {
    TensorAttnConfig cfg{.d = 8, .rank_q = 4, .rank_k = 4, .rank_v = 4, .rope_enabled = false};
    auto w = LrAttentionWeights::create(cfg, rng);
    auto x = randn({6, 8}, rng);
    const std::vector<std::int64_t> perm{3, 0, 5, 1, 4, 2};
    std::vector<double> px;
    for (auto p : perm) {
      auto r = row(x, p);
      px.insert(px.end(), r.begin(), r.end());
    }
    auto out = lr_attention_layer(x, w);
    auto pout = lr_attention_layer(Tensor::from_vector({6, 8}, px), w);
    double worst = 0;
    for (std::size_t i = 0; i < perm.size(); ++i)
      worst = std::max(worst, max_abs_diff(row(pout, static_cast<std::int64_t>(i)), row(out, perm[i])));
    CHECK(worst < 1e-12);
  }
  SUBCASE("weights do not depend on the value factors") {
    auto fx = random_factors(rng, 8, 8, 6, 2, 2, 2);
    const auto base = reference::factored_attention_dense(fx.f.a_q, fx.f.a_k, fx.f.a_v, fx.f.b_q, fx.f.b_k, fx.f.b_v);
    auto scaled_av = scale(fx.f.a_v, 3.5);
    const auto scaled = reference::factored_attention_dense(fx.f.a_q, fx.f.a_k, scaled_av, fx.f.b_q, fx.f.b_k, fx.f.b_v);
    for (std::int64_t t = 0; t < 8; ++t) {
      auto b0 = base.weights.begin() + t * 8, s0 = scaled.weights.begin() + t * 8;
      CHECK(std::max_element(b0, b0 + 8) - b0 == std::max_element(s0, s0 + 8) - s0);
    }
    auto out = lr_attention_forward(fx.f, fx.cfg);
    fx.f.a_v = scaled_av;
    CHECK(max_abs_diff(lr_attention_forward(fx.f, fx.cfg), scale(out, 3.5)) < 1e-12);
  }
  SUBCASE("gradients through phi, G, C, z and the normalization") {
    auto fx = random_factors(rng, 5, 7, 6, 2, 4, 2);
    std::vector<Tensor> all{fx.f.a_q, fx.f.a_k, fx.f.a_v, fx.f.b_q, fx.f.b_k, fx.f.b_v};
    for (auto& t : all) t.set_requires_grad(true);
    auto res = grad_check_params([&] { return probe(lr_attention_forward(fx.f, fx.cfg)); }, all, 1e-6);
    CHECK(res.max_rel_error < 1e-5);
  }
  SUBCASE("full layer with RoPE is differentiable in its trainable factors") {
    TensorAttnConfig cfg{.d = 8, .rank_q = 4, .rank_k = 4, .rank_v = 2, .rope_enabled = true};
    auto w = LrAttentionWeights::create(cfg, rng);
    auto x = randn({2, 5, 8}, rng);
    auto res = grad_check_params([&] { return probe(lr_attention_layer(x, w)); },
                                 {w.p_q, w.p_k, w.p_v, w.b_q, w.b_k, w.b_v}, 1e-6);
    CHECK(res.max_rel_error < 1e-5);
  }
  SUBCASE("cross-attention shapes") {
    TensorAttnConfig cfg{.d = 8, .rank_q = 2, .rank_k = 2, .rank_v = 2, .rope_enabled = false};
    auto w = LrAttentionWeights::create(cfg, rng);
    CHECK(lr_cross_attention_layer(randn({2, 1, 8}, rng), randn({2, 9, 8}, rng), w).shape() == Shape{2, 1, 8});
  }
}

TEST_CASE("mhsa baseline") {
  Rng rng(5);
  SUBCASE("a single token returns its value row") {
    auto w = MhsaWeights::create(8, 2, rng, false);
    auto x = randn({1, 8}, rng);
    auto expected = matmul(matmul(x, w.w_v), w.w_o);
    CHECK(max_abs_diff(mhsa_baseline_forward(x, w), expected) < 1e-14);
  }
  SUBCASE("constant keys give uniform weights") {
    auto w = MhsaWeights::create(8, 2, rng, false);
    w.w_k = Tensor::zeros({8, 8});
    auto x = randn({5, 8}, rng);
    auto expected = matmul(broadcast_to(mean(matmul(x, w.w_v), {0}, true), {5, 8}), w.w_o);
    CHECK(max_abs_diff(mhsa_baseline_forward(x, w), expected) < 1e-12);
  }
  SUBCASE("matches the triple-loop oracle at n = 8, d = 16") {
    auto w = MhsaWeights::create(16, 4, rng, false);
    auto x = randn({8, 16}, rng);
    CHECK(max_abs_diff(mhsa_baseline_forward(x, w), reference::mhsa(x, w.w_q, w.w_k, w.w_v, w.w_o, 4)) < 1e-12);
  }
  SUBCASE("heads must divide d") { CHECK_THROWS_AS(MhsaWeights::create(10, 4, rng, false), ConfigError); }
  SUBCASE("gradient") {
    auto w = MhsaWeights::create(6, 2, rng, true);
    auto x = randn({2, 4, 6}, rng);
    auto res = grad_check_params([&] { return probe(mhsa_baseline_forward(x, w)); }, {w.w_q, w.w_k, w.w_v, w.w_o}, 1e-6);
    CHECK(res.max_rel_error < 1e-5);
  }
}

TEST_CASE("complexity report") {
  TensorAttnConfig ranks{.d = 32, .rank_q = 8, .rank_k = 8, .rank_v = 8, .rope_enabled = true};
  SUBCASE("measured FLOPs agree with the analytic formulas") {
    for (auto n : {1, 16, 64}) {
      auto r = complexity_report(n, 32, 4, ranks, 7);
      REQUIRE(r.baseline.instrumented());
      REQUIRE(r.lr_tensor.instrumented());
      CHECK(std::abs(double(*r.baseline.flops_measured) / double(r.baseline.flops_analytic) - 1.0) < 0.05);
      CHECK(std::abs(double(*r.lr_tensor.flops_measured) / double(r.lr_tensor.flops_analytic) - 1.0) < 0.05);
      CHECK(*r.baseline.score_flops_measured == r.baseline.score_flops_analytic);
      CHECK(r.baseline.flops_measured > 0u);
    }
  }
  SUBCASE("score term quadruples and the low-rank total doubles with n") {
    auto a = complexity_report(64, 32, 4, ranks, 7), b = complexity_report(128, 32, 4, ranks, 7);
    CHECK(double(*b.baseline.score_flops_measured) / double(*a.baseline.score_flops_measured) ==
          doctest::Approx(4.0).epsilon(0.02));
    CHECK(double(*b.lr_tensor.flops_measured) / double(*a.lr_tensor.flops_measured) ==
          doctest::Approx(2.0).epsilon(0.10));
  }
  SUBCASE("reruns give identical FLOP counts") {
    auto a = bench_attention(Mechanism::LrTensor, 40, 16, 2, ranks, 3);
    auto b = bench_attention(Mechanism::LrTensor, 40, 16, 2, ranks, 3);
    CHECK(a.flops_measured == b.flops_measured);
    CHECK(a.flops_analytic == b.flops_analytic);
    CHECK(a.peak_bytes == b.peak_bytes);
  }
  SUBCASE("disabled instrumentation leaves measured fields absent") {
    instrument::set_enabled(false);
    auto r = bench_attention(Mechanism::Baseline, 8, 16, 2, ranks, 3);
    instrument::set_enabled(true);
    CHECK_FALSE(r.flops_measured.has_value());
    CHECK_FALSE(r.peak_bytes.has_value());
    CHECK_FALSE(r.instrumented());
    CHECK(r.to_json().find("\"flops_measured\": null") != std::string::npos);
  }
  SUBCASE("mechanism names") {
    CHECK(parse_mechanism("lr-tensor") == Mechanism::LrTensor);
    CHECK_THROWS_AS(parse_mechanism("linear"), ConfigError);
  }
}
