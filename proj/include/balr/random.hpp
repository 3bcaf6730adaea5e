#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "balr/tensor.hpp"

namespace balr {

/// Seeded generator with portable uniform/normal draws (the std
/// distributions are implementation-defined, the engine is not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Independent stream for a named component, stable across builds.
  static Rng substream(std::uint64_t seed, std::string_view name);

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Box-Muller, one draw per call.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  std::int64_t integer(std::int64_t lo, std::int64_t hi_inclusive);

 private:
  std::mt19937_64 engine_;
};

Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0);
Tensor rand_uniform(const Shape& shape, Rng& rng, double lo, double hi);

}  // namespace balr
