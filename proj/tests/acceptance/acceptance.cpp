#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "balr/ablation.hpp"
#include "balr/adapter.hpp"
#include "balr/attention.hpp"
#include "balr/bench.hpp"
#include "balr/checkpoint.hpp"
#include "balr/harness.hpp"
#include "balr/instrument.hpp"
#include "balr/reference.hpp"
#include "balr/training.hpp"
#include "balr/verify.hpp"

using namespace balr;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string title;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

HarnessConfig small_harness() {
  HarnessConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 16;
  c.depth = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.adapter_rank = 4;
  c.attn_ranks = {4, 4, 4};
  c.head_channels = 4;
  return c;
}

Outcome verify_group(const std::vector<std::string>& names) {
  Outcome o{true, ""};
  for (const auto& name : names) {
    const auto report = run_verify(name);
    for (const auto& r : report.results) {
      if (r.name != name) continue;
      o.passed = o.passed && r.passed;
      o.detail += (o.detail.empty() ? "" : "; ") + r.name + (r.passed ? ": " : " FAILED: ") + r.detail;
    }
    if (std::none_of(report.results.begin(), report.results.end(), [&](const auto& r) { return r.name == name; })) {
      o.passed = false;
      o.detail += "; missing check " + name;
    }
  }
  return o;
}

// 1
Outcome parameter_arithmetic() {
  const auto c = adapter_param_count(768, 768, 16);
  const bool ok = c.fullrank == 589824 && c.lowrank == 24576 && std::round(c.reduction * 1e4) == 9583;
  return {ok, format("full %lld, low-rank %lld, reduction %.4f", static_cast<long long>(c.fullrank),
                     static_cast<long long>(c.lowrank), c.reduction)};
}

// 2
Outcome complexity_class() {
  TensorAttnConfig cfg;
  cfg.d = 256;
  const std::vector<std::int64_t> ns{512, 1024, 2048, 4096};
  std::vector<double> lr, score;
  for (auto n : ns) {
    const auto a = bench_attention(Mechanism::LrTensor, n, 256, 8, cfg, 1, {false});
    const auto b = bench_attention(Mechanism::Baseline, n, 256, 8, cfg, 1, {false});
    if (!a.flops_measured || !b.score_flops_measured) return {false, "instrumentation produced no FLOP counts"};
    lr.push_back(static_cast<double>(*a.flops_measured));
    score.push_back(static_cast<double>(*b.score_flops_measured));
  }
  bool ok = true;
  std::string lr_ratios, score_ratios;
  for (std::size_t i = 1; i < ns.size(); ++i) {
    const double rl = lr[i] / lr[i - 1], rs = score[i] / score[i - 1];
    ok = ok && std::abs(rl - 2.0) <= 0.2 && std::abs(rs - 4.0) <= 0.08;
    lr_ratios += format("%s%.4f", i > 1 ? " " : "", rl);
    score_ratios += format("%s%.4f", i > 1 ? " " : "", rs);
  }
  return {ok, "lr-tensor doubling ratios [" + lr_ratios + "] (2.0 +- 10%), baseline score-term ratios [" +
                  score_ratios + "] (4.0 +- 2%)"};
}

// 3
Outcome memory_ratio() {
  TensorAttnConfig cfg;
  cfg.d = 256;
  const auto r = complexity_report(4096, 256, 8, cfg, 1);
  const auto ratio = r.memory_ratio();
  if (!ratio) return {false, "peak bytes were not measured"};
  return {*ratio <= 0.25, format("peak bytes lr-tensor %llu / baseline %llu = %.4f (limit 0.25)",
                                 static_cast<unsigned long long>(*r.lr_tensor.peak_bytes),
                                 static_cast<unsigned long long>(*r.baseline.peak_bytes), *ratio)};
}

// 4
Outcome oracle_equivalence() {
  Rng rng(404);
  double worst = 0;
  int distinguishable = 0;
  std::string memory_failure;
  for (int trial = 0; trial < 100; ++trial) {
    const auto nq = rng.integer(1, 32), nkv = trial % 2 ? nq : rng.integer(1, 32);
    const auto d = rng.integer(4, 16);
    TensorAttnConfig cfg;
    cfg.d = d;
    cfg.rank_q = rng.integer(1, 4);
    cfg.rank_k = rng.integer(1, 4);
    cfg.rank_v = rng.integer(1, 4);
    cfg.rope_enabled = false;
    const QKVFactorSet f{randn({nq, cfg.rank_q}, rng), randn({nkv, cfg.rank_k}, rng), randn({nkv, cfg.rank_v}, rng),
                         randn({d, cfg.rank_q}, rng),  randn({d, cfg.rank_k}, rng),   randn({d, cfg.rank_v}, rng)};
    std::size_t largest = 0;
    Tensor out;
    {
      instrument::MemoryScope scope;
      out = lr_attention_forward(f, cfg);
      largest = scope.largest_allocation();
    }
    const auto dense = reference::factored_attention_dense(f.a_q, f.a_k, f.a_v, f.b_q, f.b_k, f.b_v);
    const auto got = out.data();
    if (got.size() != dense.output.size()) return {false, "output size differs from oracle"};
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - dense.output[i]));

    const auto quadratic = static_cast<std::size_t>(nq * nkv) * sizeof(double);
    const auto linear = static_cast<std::size_t>(std::max({nq, nkv, d}) *
                                                 std::max({d, cfg.rank_q, cfg.rank_k, cfg.rank_v})) *
                        sizeof(double);
    if (largest > linear && memory_failure.empty())
      memory_failure = format("instance %d allocated %zu bytes (n_q %lld, n_kv %lld)", trial, largest,
                              static_cast<long long>(nq), static_cast<long long>(nkv));
    if (quadratic > linear) ++distinguishable;
  }

  Rng lr_rng(405);
  TensorAttnConfig big;
  big.d = 16;
  big.rank_q = big.rank_k = big.rank_v = 4;
  const std::int64_t n = 512;
  const auto w = LrAttentionWeights::create(big, lr_rng);
  const auto x = randn({n, big.d}, lr_rng).set_requires_grad(true);
  std::size_t largest = 0;
  {
    instrument::MemoryScope scope;
    sum(lr_attention_layer(x, w)).backward();
    largest = scope.largest_allocation();
  }
  const auto n2 = static_cast<std::size_t>(n * n) * sizeof(double);
  const bool ok = worst < 1e-10 && memory_failure.empty() && distinguishable > 0 && largest < n2;
  return {ok, format("max |factorized - dense| = %.3e over 100 instances (limit 1e-10); largest allocation within "
                     "linear bound in all instances (%d with n_q*n_kv above it)%s; n=512 forward+backward largest "
                     "%zu bytes vs n^2 %zu",
                     worst, distinguishable, memory_failure.empty() ? "" : (": " + memory_failure).c_str(), largest,
                     n2)};
}

// 5
Outcome gradient_suite() {
  return verify_group({"gradient-adapter", "gradient-factorization", "gradient-rope", "gradient-lr-attention",
                       "gradient-cden", "gradient-harness"});
}

// 6
Outcome rope_identities() {
  return verify_group({"rope-relative-position", "rope-identity-at-zero", "rope-norm"});
}

// 7
Outcome frozen_base() {
  const auto cfg = ablation_desk_config();
  auto model = build_balr_model(cfg, 7);
  const auto params = model.parameters();
  std::vector<std::vector<double>> before;
  for (const auto& p : params) before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());

  const auto data = synth_dataset(7, 64, cfg.image_size, 2);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Adam adam(model.trainable());
  for (int step = 0; step < 100; ++step) {
    const auto b = static_cast<std::size_t>(step * 8) % data.size();
    adam.zero_grad();
    segmentation_loss(forward_segment(model, stack_images(data, order, b, b + 8)), stack_masks(data, order, b, b + 8))
        .backward();
    adam.step(1e-3);
  }

  std::int64_t frozen_tensors = 0, moved = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto d = params[i].tensor.data();
    const bool same = std::equal(d.begin(), d.end(), before[i].begin(), before[i].end());
    if (!params[i].tensor.requires_grad()) {
      ++frozen_tensors;
      if (!same) return {false, "frozen tensor '" + params[i].name + "' changed"};
    } else if (!same) {
      ++moved;
    }
  }
  const auto enumerated = trainable_parameter_split(model);
  const auto closed = count_parameters(cfg).split();
  const auto sam = sam_scale_extrapolation();
  const bool ok = moved > 0 && enumerated.frozen == closed.frozen && enumerated.trainable == closed.trainable &&
                  sam.fraction_of_reference <= 0.05;
  return {ok, format("%lld frozen tensors bit-identical after 100 steps, %lld trainable tensors updated; trainable "
                     "%lld / total %lld = %.6f (closed form %lld / %lld); SAM-scale %lld / %lld = %.4f (limit 0.05)",
                     static_cast<long long>(frozen_tensors), static_cast<long long>(moved),
                     static_cast<long long>(enumerated.trainable),
                     static_cast<long long>(enumerated.trainable + enumerated.frozen), enumerated.fraction(),
                     static_cast<long long>(closed.trainable),
                     static_cast<long long>(closed.trainable + closed.frozen), static_cast<long long>(sam.trainable),
                     static_cast<long long>(sam.reference_total), sam.fraction_of_reference)};
}

// 8
Outcome ablation_structure() {
  AblationOptions opts;
  opts.log = [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); };
  const auto table = ablation_run({1, 2, 3}, opts);

  const bool expected[4][3] = {{false, false, false}, {true, false, false}, {true, true, false}, {true, true, true}};
  bool flags_ok = table.rows.size() == 4;
  for (std::size_t k = 0; flags_ok && k < 4; ++k) {
    const auto& a = table.rows[k].arm;
    flags_ok = a.lr_tensor == expected[k][0] && a.adapters == expected[k][1] && a.cden == expected[k][2] &&
               table.rows[k].test.size() == 3;
  }
  if (!flags_ok) return {false, "arm flags or per-seed results do not match the four-arm pattern"};

  const double gap = table.rows[3].dice.mean - table.rows[0].dice.mean;
  bool monotone = true;
  std::string rows;
  for (std::size_t k = 0; k < 4; ++k) {
    rows += format("%s%s %.4f+-%.4f", k ? ", " : "", table.rows[k].arm.name.c_str(), table.rows[k].dice.mean,
                   table.rows[k].dice.sd);
    if (k > 0) {
      const double sd = std::min(table.rows[k - 1].dice.sd, table.rows[k].dice.sd);
      monotone = monotone && table.rows[k].dice.mean >= table.rows[k - 1].dice.mean - sd;
    }
  }
  return {gap >= 0.05 && monotone,
          format("mDSC %s; all - none = %.4f (need >= 0.05); monotone within 1 sd: %s", rows.c_str(), gap,
                 monotone ? "yes" : "no")};
}

// 9
Outcome determinism() {
  const auto cfg = small_harness();
  const auto a = serialize_model(build_balr_model(cfg, 11));
  const auto b = serialize_model(build_balr_model(cfg, 11));
  const bool init_ok = a == b && a != serialize_model(build_balr_model(cfg, 12));

  auto run = [&] {
    auto model = build_balr_model(cfg, 11);
    const auto data = split_dataset(synth_dataset(11, 40, cfg.image_size, 2));
    const auto h = train(model, data, Schedule{1e-3, 3, 0.0, true}, 11);
    return h.to_csv() + h.to_json();
  };
  const bool history_ok = run() == run();

  TensorAttnConfig attn;
  attn.d = 64;
  bool flops_ok = true;
  for (auto m : {Mechanism::Baseline, Mechanism::LrTensor}) {
    const auto x = bench_attention(m, 128, 64, 4, attn, 3), y = bench_attention(m, 128, 64, 4, attn, 3);
    flops_ok = flops_ok && x.flops_measured && x.flops_measured == y.flops_measured &&
               x.flops_analytic == y.flops_analytic && x.peak_bytes == y.peak_bytes;
  }
  return {init_ok && history_ok && flops_ok,
          format("model init %s, training history %s, benchmark FLOP counts %s", init_ok ? "identical" : "DIFFERS",
                 history_ok ? "identical" : "DIFFERS", flops_ok ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  instrument::set_enabled(true);

  const std::vector<Criterion> criteria{
      {1, "adapter parameter arithmetic", 1, parameter_arithmetic},
      {2, "linear vs quadratic FLOP scaling", 120, complexity_class},
      {3, "peak memory ratio at n=4096", 120, memory_ratio},
      {4, "factorized attention oracle", 60, oracle_equivalence},
      {5, "gradient suite", 180, gradient_suite},
      {6, "RoPE identities", 60, rope_identities},
      {7, "frozen-base contract", 120, frozen_base},
      {8, "four-arm ablation", 1800, ablation_structure},
      {9, "determinism", 120, determinism},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_budget = secs < c.budget_seconds;
    const bool passed = o.passed && in_budget;
    if (!passed) ++failures;
    std::printf("[PRIMARY] %s criterion %d: %s (%.1f s, budget %.0f s%s) - %s\n", passed ? "PASS" : "FAIL", c.id,
                c.title.c_str(), secs, c.budget_seconds, in_budget ? "" : ", OVER BUDGET", o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
