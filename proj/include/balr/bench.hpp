#pragma once

// Analytic and measured cost of one attention layer (baseline softmax MHSA
// vs low-rank tensor attention). FLOPs follow the convention documented in
// instrument.hpp and count the forward pass only; peak bytes cover forward
// plus backward of sum(output).

#include <cstdint>
#include <optional>
#include <string>

#include "balr/attention.hpp"

namespace balr {

enum class Mechanism { Baseline, LrTensor };

const char* mechanism_name(Mechanism m);
/// Accepts "baseline" and "lr-tensor"; throws ConfigError otherwise.
Mechanism parse_mechanism(const std::string& name);

struct BaselineFlops {
  std::uint64_t total;
  std::uint64_t score_term;  // Q K^T, softmax and P V: the n^2 part
};
BaselineFlops analytic_flops_baseline(std::int64_t n_q, std::int64_t n_kv, std::int64_t d, std::int64_t heads);

/// Includes the frozen Q/K/V/O projections.
std::uint64_t analytic_flops_lr(std::int64_t n_q, std::int64_t n_kv, const TensorAttnConfig& cfg);

struct BenchReport {
  Mechanism mechanism = Mechanism::Baseline;
  std::int64_t n = 0;
  std::int64_t d = 0;
  std::int64_t heads = 0;
  std::int64_t rank_q = 0, rank_k = 0, rank_v = 0;
  std::uint64_t flops_analytic = 0;
  std::optional<std::uint64_t> flops_measured;
  std::uint64_t score_flops_analytic = 0;
  std::optional<std::uint64_t> score_flops_measured;
  std::optional<std::uint64_t> peak_bytes;
  double wall_ms = 0.0;
  std::uint64_t seed = 0;

  bool instrumented() const { return flops_measured.has_value() && peak_bytes.has_value(); }
  std::string to_json() const;
};

struct BenchOptions {
  bool backward = true;  // measure peak bytes over forward + backward
};

/// One self-attention layer on a [1, n, d] input drawn from `seed`. The
/// baseline's projections are trainable (full fine-tuning); the low-rank
/// layer trains only its factor maps and bases.
BenchReport bench_attention(Mechanism mechanism, std::int64_t n, std::int64_t d, std::int64_t heads,
                            const TensorAttnConfig& ranks, std::uint64_t seed, const BenchOptions& options = {});

struct ComplexityReport {
  BenchReport baseline;
  BenchReport lr_tensor;
  /// lr_tensor.peak_bytes / baseline.peak_bytes when both were measured.
  std::optional<double> memory_ratio() const;
};

ComplexityReport complexity_report(std::int64_t n, std::int64_t d, std::int64_t heads, const TensorAttnConfig& cfg,
                                   std::uint64_t seed, const BenchOptions& options = {});

}  // namespace balr
