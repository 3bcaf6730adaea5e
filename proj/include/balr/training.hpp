#pragma once

// Synthetic segmentation data, overlap metrics, the cosine schedule, Adam and
// the epoch loop with best-validation snapshots.

#include <cstdint>
#include <string>
#include <vector>

#include "balr/harness.hpp"

namespace balr {

struct SegSample {
  Tensor image;  // [3, H, W] in [0, 1]
  Tensor mask;   // [1, H, W] with values in {0, 1}
};

struct SynthOptions {
  double min_area = 0.05;
  double max_area = 0.4;
};

/// Irregular blobs on a textured background. Higher difficulty lowers the
/// contrast, softens and roughens the boundary and adds noise. Each sample
/// has its own named substream, so sample i does not depend on count.
/// Throws ConfigError for count < 10, size not divisible by 16, or
/// difficulty outside [1, 5].
std::vector<SegSample> synth_dataset(std::uint64_t seed, std::int64_t count, std::int64_t size, int difficulty,
                                     const SynthOptions& opts = {});

struct DataSplit {
  std::vector<SegSample> train;
  std::vector<SegSample> val;
  std::vector<SegSample> test;
};

/// 7:1:2 in order: floor(0.7 n) train, floor(0.1 n) val, the rest test.
DataSplit split_dataset(std::vector<SegSample> samples);

/// Stacks samples [begin, end) in the given order into [N, C, H, W].
Tensor stack_images(const std::vector<SegSample>& samples, const std::vector<std::size_t>& order, std::size_t begin,
                    std::size_t end);
Tensor stack_masks(const std::vector<SegSample>& samples, const std::vector<std::size_t>& order, std::size_t begin,
                   std::size_t end);

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct MetricsReport {
  double dice = 0, miou = 0, recall = 0, precision = 0, accuracy = 0;
};

/// Throws ValidationError on shape mismatch or values other than 0 and 1.
ConfusionCounts confusion(const Tensor& pred, const Tensor& gt);
/// Empty prediction against empty ground truth scores 1 everywhere; a ratio
/// with an empty denominator is taken as 1.
MetricsReport metrics_from_counts(const ConfusionCounts& c);
MetricsReport metrics(const Tensor& pred, const Tensor& gt);
MetricsReport mean_metrics(const std::vector<MetricsReport>& reports);

/// logits > 0 (probability > 0.5) as a {0, 1} mask.
Tensor binarize_logits(const Tensor& logits);

struct Schedule {
  double lr0 = 1e-4;
  std::int64_t epochs = 40;
  double lr_min = 0.0;
  bool cosine = true;

  void validate() const;
};

/// lr_min + (lr0 - lr_min)(1 + cos(pi t / T)) / 2, or lr0 when cosine is off.
/// Throws ScheduleError for t outside [0, T].
double cosine_lr(double t, const Schedule& s);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, AdamConfig cfg = {});

  void zero_grad();
  /// Parameters without a gradient are skipped.
  void step(double lr);
  std::int64_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

/// Soft Dice loss plus mean binary cross-entropy, equal weights.
Tensor segmentation_loss(const Tensor& logits, const Tensor& masks);

MetricsReport evaluate(const Model& model, const std::vector<SegSample>& samples, std::int64_t batch_size = 8);

struct TrainOptions {
  std::int64_t batch_size = 8;
  /// Copy the best validation snapshot back into the model when done.
  bool restore_best = true;
};

struct EpochRecord {
  std::int64_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  MetricsReport val;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::int64_t best_epoch = -1;
  double best_val_dice = 0;
  std::vector<std::uint8_t> best_checkpoint;  // serialized model, empty if no epoch ran

  std::string to_csv() const;
  std::string to_json() const;
};

/// Deterministic in (model, data, schedule, seed). Throws DivergenceError
/// when the loss or a gradient stops being finite.
TrainHistory train(Model& model, const DataSplit& data, const Schedule& schedule, std::uint64_t seed,
                   const TrainOptions& opts = {});

}  // namespace balr
