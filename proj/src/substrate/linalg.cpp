#include <algorithm>
#include <numeric>

#include <Eigen/Core>

#include "balr/ops.hpp"
#include "detail.hpp"

namespace balr {

namespace kernels {

void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const double* a,
          const double* b, double* c, bool accumulate) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  instrument::add_flops(static_cast<std::uint64_t>(2 * m * n * k));
  Eigen::Map<Mat> cm(c, m, n);
  if (!accumulate) cm.setZero();
  if (m == 0 || n == 0 || k == 0) return;
  const Eigen::Map<const Mat> am(a, trans_a ? k : m, trans_a ? m : k);
  const Eigen::Map<const Mat> bm(b, trans_b ? n : k, trans_b ? k : n);
  if (!trans_a && !trans_b)
    cm.noalias() += am * bm;
  else if (!trans_a)
    cm.noalias() += am * bm.transpose();
  else if (!trans_b)
    cm.noalias() += am.transpose() * bm;
  else
    cm.noalias() += am.transpose() * bm.transpose();
}

}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b, Trans trans_a, Trans trans_b) {
  if (a.rank() < 2) throw DimensionError("matmul: lhs must have rank >= 2, got " + shape_str(a.shape()), -1);
  if (b.rank() < 2) throw DimensionError("matmul: rhs must have rank >= 2, got " + shape_str(b.shape()), -1);
  const bool ta = trans_a == Trans::Yes;
  const bool tb = trans_b == Trans::Yes;
  const auto ra = a.rank();
  const std::int64_t m = ta ? a.size(-1) : a.size(-2);
  const std::int64_t ka = ta ? a.size(-2) : a.size(-1);
  const std::int64_t kb = tb ? b.size(-1) : b.size(-2);
  const std::int64_t n = tb ? b.size(-2) : b.size(-1);
  if (ka != kb)
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()),
                         static_cast<int>(ta ? ra - 2 : ra - 1));
  const std::int64_t k = ka;

  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  if (batch_b.empty()) {
    batch = batch_a;
  } else if (batch_a.empty()) {
    batch = batch_b;
  } else if (batch_a == batch_b) {
    batch = batch_a;
  } else {
    throw DimensionError("matmul: batch shapes differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()), 0);
  }
  const std::int64_t nbatch = shape_numel(batch);
  const bool shared_a = batch_a.empty() && nbatch > 1;
  const bool shared_b = batch_b.empty() && nbatch > 1;

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  // A batched lhs against a shared rhs folds into one tall gemm.
  const bool fold = shared_b && !ta;
  const std::int64_t steps = fold ? 1 : nbatch;
  const std::int64_t m_eff = fold ? m * nbatch : m;

  Buffer out(static_cast<std::size_t>(nbatch * m * n));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::int64_t s = 0; s < steps; ++s) {
    const double* as = pa + (shared_a ? 0 : s * m * k);
    const double* bs = pb + (shared_b ? 0 : s * k * n);
    kernels::gemm(ta, tb, m_eff, n, k, as, bs, out.data() + s * m_eff * n, false);
  }

  std::shared_ptr<Buffer> da = b.requires_grad() ? a.impl()->data : nullptr;
  std::shared_ptr<Buffer> db = a.requires_grad() ? b.impl()->data : nullptr;
  const std::int64_t size_a = a.numel();
  const std::int64_t size_b = b.numel();
  return autograd::make_output(
      std::move(out_shape), std::move(out), {a, b},
      [=](Buffer g, const std::vector<bool>& needs) {
        std::vector<Buffer> grads(2);
        if (needs[0]) {
          Buffer ga(static_cast<std::size_t>(size_a), 0.0);
          for (std::int64_t s = 0; s < steps; ++s) {
            const double* gs = g.data() + s * m_eff * n;
            const double* bs = db->data() + (shared_b ? 0 : s * k * n);
            double* gas = ga.data() + (shared_a ? 0 : s * m * k);
            if (!ta) {
              // dA = dC * op(B)^T
              kernels::gemm(false, !tb, m_eff, k, n, gs, bs, gas, true);
            } else {
              // A stored K x M: dA = op(B) * dC^T
              kernels::gemm(tb, true, k, m, n, bs, gs, gas, true);
            }
          }
          grads[0] = std::move(ga);
        }
        if (needs[1]) {
          Buffer gb(static_cast<std::size_t>(size_b), 0.0);
          for (std::int64_t s = 0; s < steps; ++s) {
            const double* gs = g.data() + s * m_eff * n;
            const double* as = da->data() + (shared_a ? 0 : s * m * k);
            double* gbs = gb.data() + (shared_b ? 0 : s * k * n);
            if (!tb) {
              // dB = op(A)^T * dC
              kernels::gemm(!ta, false, k, n, m_eff, as, gs, gbs, true);
            } else {
              // B stored N x K: dB = dC^T * op(A)
              kernels::gemm(true, ta, n, k, m_eff, gs, as, gbs, true);
            }
          }
          grads[1] = std::move(gb);
        }
        return grads;
      },
      "matmul");
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  Shape resolved = shape;
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < resolved.size(); ++i) {
    if (resolved[i] == -1) {
      if (infer >= 0) throw DimensionError("reshape: more than one inferred extent", static_cast<int>(i));
      infer = static_cast<int>(i);
    } else {
      if (resolved[i] <= 0) throw DimensionError("reshape: extent must be positive", static_cast<int>(i));
      known *= resolved[i];
    }
  }
  if (infer >= 0) {
    if (a.numel() % known != 0) throw DimensionError("reshape: cannot infer extent for " + shape_str(shape), infer);
    resolved[static_cast<std::size_t>(infer)] = a.numel() / known;
  }
  if (shape_numel(resolved) != a.numel())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count", -1);
  return autograd::make_view(
      resolved, a.impl()->data, a,
      [](Buffer g, const std::vector<bool>&) { return std::vector<Buffer>{std::move(g)}; }, "reshape");
}

namespace {

Buffer permute_buffer(const double* src, const Shape& in_shape, const std::vector<std::int64_t>& order) {
  const std::size_t rank = in_shape.size();
  const auto in_strides = detail::contiguous_strides(in_shape);
  Shape out_shape(rank);
  detail::Strides gather(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[static_cast<std::size_t>(order[i])];
    gather[i] = in_strides[static_cast<std::size_t>(order[i])];
  }
  Buffer out(static_cast<std::size_t>(shape_numel(in_shape)));
  detail::Strides zero(rank, 0);
  detail::walk2(out_shape, gather, zero, [&](std::int64_t o, std::int64_t i, std::int64_t) { out[o] = src[i]; });
  return out;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<std::int64_t>& order) {
  const auto rank = a.rank();
  if (static_cast<std::int64_t>(order.size()) != rank)
    throw DimensionError("permute: order has " + std::to_string(order.size()) + " axes for " + shape_str(a.shape()), -1);
  std::vector<std::int64_t> norm(order.size());
  std::vector<bool> used(order.size(), false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    norm[i] = detail::normalize_axis(order[i], rank);
    if (used[static_cast<std::size_t>(norm[i])]) throw DimensionError("permute: repeated axis", static_cast<int>(norm[i]));
    used[static_cast<std::size_t>(norm[i])] = true;
  }
  Shape out_shape(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) out_shape[i] = a.shape()[static_cast<std::size_t>(norm[i])];
  std::vector<std::int64_t> inverse(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inverse[static_cast<std::size_t>(norm[i])] = static_cast<std::int64_t>(i);
  return autograd::make_output(
      out_shape, permute_buffer(a.data().data(), a.shape(), norm), {a},
      [out_shape, inverse](Buffer g, const std::vector<bool>&) {
        return std::vector<Buffer>{permute_buffer(g.data(), out_shape, inverse)};
      },
      "permute");
}

Tensor transpose(const Tensor& a, std::int64_t axis0, std::int64_t axis1) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(a.rank()));
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[static_cast<std::size_t>(detail::normalize_axis(axis0, a.rank()))],
            order[static_cast<std::size_t>(detail::normalize_axis(axis1, a.rank()))]);
  return permute(a, order);
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  const Shape out = detail::broadcast_shape(a.shape(), shape, "broadcast_to");
  if (out != shape) throw DimensionError("broadcast_to: " + shape_str(a.shape()) + " -> " + shape_str(shape), -1);
  if (out == a.shape()) return a;
  Buffer r(static_cast<std::size_t>(shape_numel(out)));
  const double* src = a.data().data();
  auto sa = detail::broadcast_strides(a.shape(), out.size());
  detail::Strides zero(out.size(), 0);
  detail::walk2(out, sa, zero, [&](std::int64_t o, std::int64_t i, std::int64_t) { r[o] = src[i]; });
  Shape in_shape = a.shape();
  return autograd::make_output(
      out, std::move(r), {a},
      [out, in_shape](Buffer g, const std::vector<bool>&) {
        return std::vector<Buffer>{detail::reduce_to(g, out, in_shape)};
      },
      "broadcast_to");
}

Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs", -1);
  const auto rank = parts[0].rank();
  axis = detail::normalize_axis(axis, rank);
  const auto ax = static_cast<std::size_t>(axis);
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw DimensionError("concat: rank mismatch", -1);
    for (std::size_t i = 0; i < static_cast<std::size_t>(rank); ++i)
      if (i != ax && p.shape()[i] != parts[0].shape()[i])
        throw DimensionError("concat: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()), static_cast<int>(i));
    out_shape[ax] += p.shape()[ax];
  }
  std::int64_t outer = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
  std::int64_t inner = 1;
  for (std::size_t i = ax + 1; i < out_shape.size(); ++i) inner *= out_shape[i];

  std::vector<std::int64_t> widths;
  for (const auto& p : parts) widths.push_back(p.shape()[ax] * inner);
  const std::int64_t row = out_shape[ax] * inner;

  Buffer out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::int64_t col = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const double* src = parts[pi].data().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(src + o * widths[pi], src + (o + 1) * widths[pi], out.data() + o * row + col);
    col += widths[pi];
  }
  return autograd::make_output(
      out_shape, std::move(out), parts,
      [widths, outer, row](Buffer g, const std::vector<bool>& needs) {
        std::vector<Buffer> grads(widths.size());
        std::int64_t c = 0;
        for (std::size_t pi = 0; pi < widths.size(); ++pi) {
          if (needs[pi]) {
            Buffer gp(static_cast<std::size_t>(outer * widths[pi]));
            for (std::int64_t o = 0; o < outer; ++o)
              std::copy(g.data() + o * row + c, g.data() + o * row + c + widths[pi], gp.data() + o * widths[pi]);
            grads[pi] = std::move(gp);
          }
          c += widths[pi];
        }
        return grads;
      },
      "concat");
}

}  // namespace balr
