#pragma once

#include <cstdint>
#include <vector>

#include "balr/errors.hpp"
#include "balr/tensor.hpp"

namespace balr::detail {

using Strides = std::vector<std::int64_t>;

inline std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("axis out of range for rank " + std::to_string(rank), static_cast<int>(axis));
  return axis;
}

inline Strides contiguous_strides(const Shape& shape) {
  Strides s(shape.size(), 1);
  for (std::int64_t i = static_cast<std::int64_t>(shape.size()) - 2; i >= 0; --i)
    s[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(i + 1)] * shape[static_cast<std::size_t>(i + 1)];
  return s;
}

/// Strides of `shape` right-aligned into `rank` axes; broadcast axes get 0.
inline Strides broadcast_strides(const Shape& shape, std::size_t rank) {
  Strides out(rank, 0);
  auto own = contiguous_strides(shape);
  const std::size_t offset = rank - shape.size();
  for (std::size_t i = 0; i < shape.size(); ++i) out[offset + i] = shape[i] == 1 ? 0 : own[i];
  return out;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b),
                           static_cast<int>(i));
    out[i] = std::max(da, db);
  }
  return out;
}

/// Visits every element of `out` in row-major order, passing the flat output
/// index and the flat offsets into two operands described by strides.
template <class F>
void walk2(const Shape& out, const Strides& sa, const Strides& sb, F&& f) {
  const std::size_t rank = out.size();
  const std::int64_t total = shape_numel(out);
  if (rank == 0) {
    f(std::int64_t{0}, std::int64_t{0}, std::int64_t{0});
    return;
  }
  std::vector<std::int64_t> idx(rank, 0);
  const std::int64_t inner = out[rank - 1];
  const std::int64_t ia = sa[rank - 1];
  const std::int64_t ib = sb[rank - 1];
  std::int64_t oa = 0;
  std::int64_t ob = 0;
  for (std::int64_t o = 0; o < total; o += inner) {
    for (std::int64_t j = 0; j < inner; ++j) f(o + j, oa + j * ia, ob + j * ib);
    for (std::int64_t ax = static_cast<std::int64_t>(rank) - 2; ax >= 0; --ax) {
      const auto u = static_cast<std::size_t>(ax);
      ++idx[u];
      oa += sa[u];
      ob += sb[u];
      if (idx[u] < out[u]) break;
      oa -= sa[u] * out[u];
      ob -= sb[u] * out[u];
      idx[u] = 0;
    }
  }
}

/// Sums a gradient of shape `out` back onto an operand of shape `in`.
inline Buffer reduce_to(const Buffer& g, const Shape& out, const Shape& in) {
  if (out == in) return g;
  Buffer r(static_cast<std::size_t>(shape_numel(in)), 0.0);
  auto sa = broadcast_strides(in, out.size());
  Strides zero(out.size(), 0);
  walk2(out, sa, zero, [&](std::int64_t o, std::int64_t a, std::int64_t) { r[a] += g[o]; });
  return r;
}

}  // namespace balr::detail
