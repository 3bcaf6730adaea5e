#include "balr/random.hpp"

#include <cmath>
#include <numbers>

namespace balr {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Rng Rng::substream(std::uint64_t seed, std::string_view name) { return Rng(splitmix64(seed ^ fnv1a(name))); }

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::int64_t Rng::integer(std::int64_t lo, std::int64_t hi_inclusive) {
  const auto span = static_cast<std::uint64_t>(hi_inclusive - lo) + 1;
  return lo + static_cast<std::int64_t>(engine_() % span);
}

Tensor randn(const Shape& shape, Rng& rng, double stddev) {
  Buffer b(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : b) v = rng.normal() * stddev;
  return Tensor::from_buffer(shape, std::move(b));
}

Tensor rand_uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  Buffer b(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : b) v = rng.uniform(lo, hi);
  return Tensor::from_buffer(shape, std::move(b));
}

}  // namespace balr
