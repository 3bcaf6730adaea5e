#pragma once

// Four-arm component ablation: none, +LR-Tensor, +LR-Tensor+Adapters, and
// all three (with CDEN), each trained per seed and scored on held-out data.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "balr/training.hpp"

namespace balr {

struct AblationArm {
  std::string name;
  bool lr_tensor = false;
  bool adapters = false;
  bool cden = false;

  HarnessConfig apply(HarnessConfig cfg) const;
};

/// Rows in order: none, +LR-Tensor, +LR-Tensor+Adapters, all.
std::array<AblationArm, 4> ablation_arms();

/// Small model for single-core desk runs: 32 px images, patch 4, width 48.
HarnessConfig ablation_desk_config();

struct AblationOptions {
  HarnessConfig base = ablation_desk_config();
  Schedule schedule{1e-3, 40, 0.0, true};
  std::int64_t dataset_size = 200;
  int difficulty = 2;
  TrainOptions train;
  /// Progress lines, e.g. for stderr. May be empty.
  std::function<void(const std::string&)> log;
};

struct MeanSd {
  double mean = 0;
  double sd = 0;  // sample standard deviation (n - 1)
};
MeanSd mean_sd(const std::vector<double>& values);

struct AblationRow {
  AblationArm arm;
  std::vector<std::uint64_t> seeds;
  std::vector<MetricsReport> test;  // one per seed
  MeanSd dice;
  MeanSd miou;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::int64_t difficulty = 0;

  std::string to_csv() const;
  std::string to_json() const;
};

/// Throws ConfigError with fewer than 3 seeds.
AblationTable ablation_run(const std::vector<std::uint64_t>& seeds, const AblationOptions& opts = {});

}  // namespace balr
