#include <algorithm>
#include <cmath>
#include <numbers>

#include "balr/errors.hpp"
#include "balr/training.hpp"

namespace balr {
namespace {

struct Harmonic {
  int k;
  double amp, phase;
};

SegSample make_sample(Rng& rng, std::int64_t size, int difficulty, const SynthOptions& opts) {
  const double s = static_cast<double>(size), diff = difficulty;
  const double pi = std::numbers::pi;
  const auto plane = static_cast<std::size_t>(size * size);

  for (;;) {
    const double area = rng.uniform(opts.min_area + 0.25 * (opts.max_area - opts.min_area),
                                    opts.max_area - 0.25 * (opts.max_area - opts.min_area));
    const double r0 = s * std::sqrt(area / pi);
    const double cx = rng.uniform(0.35, 0.65) * s, cy = rng.uniform(0.35, 0.65) * s;
    std::vector<Harmonic> shape;
    for (int k = 2; k <= 5; ++k) shape.push_back({k, rng.uniform(0.0, 0.06 * diff), rng.uniform(0.0, 2 * pi)});
    for (int k = 6; k <= 14; ++k) shape.push_back({k, rng.uniform(0.0, 0.012 * diff), rng.uniform(0.0, 2 * pi)});
    const double blur = 0.4 * diff;

    std::vector<double> mask(plane), soft(plane);
    double covered = 0;
    for (std::int64_t y = 0; y < size; ++y)
      for (std::int64_t x = 0; x < size; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
        const double theta = std::atan2(dy, dx);
        double r = 1.0;
        for (const auto& h : shape) r += h.amp * std::cos(h.k * theta + h.phase);
        const double margin = r0 * r - std::hypot(dx, dy);
        const auto i = static_cast<std::size_t>(y * size + x);
        mask[i] = margin > 0 ? 1.0 : 0.0;
        soft[i] = 1.0 / (1.0 + std::exp(-margin / blur));
        covered += mask[i];
      }
    const double frac = covered / static_cast<double>(plane);
    if (frac < opts.min_area || frac > opts.max_area) continue;

    const double contrast = 0.36 / diff, texture = 0.05 * diff, noise = 0.03 * diff;
    std::vector<double> img(3 * plane);
    for (int c = 0; c < 3; ++c) {
      const double bg = rng.uniform(0.35, 0.65);
      const double fg = bg + (rng.uniform() < 0.5 ? -contrast : contrast);
      const double fx = rng.uniform(1.0, 4.0) * 2 * pi / s, fy = rng.uniform(1.0, 4.0) * 2 * pi / s;
      const double ph = rng.uniform(0.0, 2 * pi);
      for (std::int64_t y = 0; y < size; ++y)
        for (std::int64_t x = 0; x < size; ++x) {
          const auto i = static_cast<std::size_t>(y * size + x);
          double v = bg + (fg - bg) * soft[i];
          v += texture * std::sin(fx * static_cast<double>(x) + fy * static_cast<double>(y) + ph);
          v += rng.normal(0.0, noise);
          img[static_cast<std::size_t>(c) * plane + i] = std::clamp(v, 0.0, 1.0);
        }
    }
    return {Tensor::from_vector({3, size, size}, img), Tensor::from_vector({1, size, size}, mask)};
  }
}

Tensor stack(const std::vector<SegSample>& samples, const std::vector<std::size_t>& order, std::size_t begin,
             std::size_t end, bool masks) {
  if (begin >= end || end > order.size()) throw ConfigError("stack: empty or out-of-range batch");
  const auto& first = masks ? samples[order[begin]].mask : samples[order[begin]].image;
  Shape shape{static_cast<std::int64_t>(end - begin)};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Buffer out;
  out.reserve(static_cast<std::size_t>(shape_numel(shape)));
  for (auto i = begin; i < end; ++i) {
    const auto& t = masks ? samples[order[i]].mask : samples[order[i]].image;
    if (t.shape() != first.shape()) throw DimensionError("stack: samples have different shapes", 0);
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return Tensor::from_buffer(shape, std::move(out));
}

}  // namespace

std::vector<SegSample> synth_dataset(std::uint64_t seed, std::int64_t count, std::int64_t size, int difficulty,
                                     const SynthOptions& opts) {
  if (count < 10)
    throw ConfigError("synth_dataset: count " + std::to_string(count) + " is too small for a 7:1:2 split (need >= 10)");
  if (size < 16 || size % 16 != 0)
    throw ConfigError("synth_dataset: size " + std::to_string(size) + " is not a positive multiple of 16");
  if (difficulty < 1 || difficulty > 5)
    throw ConfigError("synth_dataset: difficulty " + std::to_string(difficulty) + " outside [1, 5]");
  if (!(opts.min_area > 0 && opts.min_area < opts.max_area && opts.max_area < 1))
    throw ConfigError("synth_dataset: area band must satisfy 0 < min < max < 1");
  std::vector<SegSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    auto rng = Rng::substream(seed, "synth." + std::to_string(i));
    out.push_back(make_sample(rng, size, difficulty, opts));
  }
  return out;
}

DataSplit split_dataset(std::vector<SegSample> samples) {
  const auto n = samples.size();
  if (n < 10) throw ConfigError("split_dataset: need at least 10 samples, got " + std::to_string(n));
  const auto n_train = n * 7 / 10, n_val = n / 10;
  DataSplit s;
  s.train.assign(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(samples.begin() + static_cast<std::ptrdiff_t>(n_train),
               samples.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(samples.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), samples.end());
  return s;
}

Tensor stack_images(const std::vector<SegSample>& samples, const std::vector<std::size_t>& order, std::size_t begin,
                    std::size_t end) {
  return stack(samples, order, begin, end, false);
}

Tensor stack_masks(const std::vector<SegSample>& samples, const std::vector<std::size_t>& order, std::size_t begin,
                   std::size_t end) {
  return stack(samples, order, begin, end, true);
}

}  // namespace balr
