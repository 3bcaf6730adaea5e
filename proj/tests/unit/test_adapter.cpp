#include <Eigen/Dense>
#include <cmath>
#include <set>

#include "balr/adapter.hpp"
#include "balr/block.hpp"
#include "balr/errors.hpp"
#include "balr/grad_check.hpp"
#include "balr/reference.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace balr;
using balr::testing::bit_equal;
using balr::testing::max_abs_diff;
using balr::testing::probe;

namespace {

LowRankAdapter random_adapter(std::int64_t m, std::int64_t r, Rng& rng, double s = 0.7) {
  LowRankAdapter a = LowRankAdapter::create(m, r, rng, s);
  a.down.u = make_param({r, r}, rng, 0.5, true);
  a.down.v = make_param({m, r}, rng, 0.5, true);
  a.up.u = make_param({m, r}, rng, 0.5, true);
  a.up.v = make_param({r, r}, rng, 0.5, true);
  return a;
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.size(0), t.size(1));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = t.at({i, j});
  return m;
}

Tensor from_eigen(const Eigen::MatrixXd& m) {
  std::vector<double> v(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
  return Tensor::from_vector({m.rows(), m.cols()}, v);
}

}  // namespace

TEST_CASE("lowrank_apply: full-rank identity factorization is the identity") {
  std::vector<double> eye(36, 0.0);
  for (int i = 0; i < 6; ++i) eye[static_cast<std::size_t>(i * 7)] = 1.0;
  LowRankLinear lin{Tensor::from_vector({6, 6}, eye), Tensor::from_vector({6, 6}, eye)};
  Rng rng(1);
  auto x = randn({3, 4, 6}, rng);
  CHECK(max_abs_diff(lowrank_apply(x, lin), x) == 0.0);
}

TEST_CASE("lowrank_apply matches the dense materialization") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = rng.integer(1, 12), n = rng.integer(1, 12);
    const auto r = rng.integer(1, std::min(m, n));
    auto lin = LowRankLinear::create(m, n, r, rng, 1.0, false);
    auto x = randn({rng.integer(1, 5), n}, rng);
    CHECK(max_abs_diff(lowrank_apply(x, lin), reference::lowrank_dense(x, lin.u, lin.v)) < 1e-12);
  }
  auto lin = LowRankLinear::create(5, 4, 2, rng, 1.0, false);
  auto v = randn({4}, rng);
  CHECK(lowrank_apply(v, lin).shape() == Shape{5});
  CHECK_THROWS_AS(lowrank_apply(randn({2, 5}, rng), lin), DimensionError);
  CHECK_THROWS_AS(LowRankLinear::create(5, 4, 5, rng, 1.0, false), ConfigError);
}

TEST_CASE("lowrank_apply never allocates the m x n product") {
  Rng rng(3);
  auto lin = LowRankLinear::create(64, 48, 2, rng, 1.0, false);
  auto x = randn({2, 48}, rng);
  instrument::MemoryScope scope;
  auto y = lowrank_apply(x, lin);
  CHECK(scope.largest_allocation() < 64 * 48 * sizeof(double));
}

TEST_CASE("truncated SVD factors: error decreases as rank grows") {
  Rng rng(4);
  const std::int64_t m = 10, n = 8;
  auto w = randn({m, n}, rng);
  auto x = randn({6, n}, rng);
  const Eigen::MatrixXd dense = to_eigen(x) * to_eigen(w).transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(w), Eigen::ComputeThinU | Eigen::ComputeThinV);
  double previous = INFINITY;
  for (std::int64_t r = 1; r <= n; ++r) {
    Eigen::MatrixXd u = svd.matrixU().leftCols(r) * svd.singularValues().head(r).asDiagonal();
    Eigen::MatrixXd v = svd.matrixV().leftCols(r);
    LowRankLinear lin{from_eigen(u), from_eigen(v)};
    const Eigen::MatrixXd y = to_eigen(lowrank_apply(x, lin));
    const double err = (y - dense).norm();
    INFO("rank " << r);
    CHECK(err < previous);
    previous = err;
  }
  CHECK(previous < 1e-10);
}

TEST_CASE("adapter_forward") {
  Rng rng(5);
  SUBCASE("s = 0 annihilates the output") {
    auto a = random_adapter(16, 4, rng, 0.0);
    auto x = randn({3, 16}, rng);
    auto y = adapter_forward(x, a);
    CHECK(y.shape() == x.shape());
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("default init gives a zero delta") {
    auto a = LowRankAdapter::create(16, 4, rng);
    CHECK(a.s.item() == 1.0);
    auto y = adapter_forward(randn({2, 16}, rng), a);
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("matches the dense two-matrix reference") {
    auto a = random_adapter(16, 4, rng);
    auto x = randn({5, 16}, rng);
    CHECK(max_abs_diff(adapter_forward(x, a),
                       reference::adapter_dense(x, a.down.u, a.down.v, a.up.u, a.up.v, a.s.item())) < 1e-12);
  }
  SUBCASE("gradients w.r.t. x, U, V and s") {
    auto a = random_adapter(16, 4, rng);
    auto x = randn({3, 16}, rng);
    x.set_requires_grad(true);
    auto res = grad_check_params([&] { return sum(adapter_forward(x, a)); },
                                 {x, a.down.u, a.down.v, a.up.u, a.up.v, a.s}, 1e-5);
    CHECK(res.max_rel_error < 1e-6);
    auto probed = grad_check_params([&] { return probe(adapter_forward(x, a)); },
                                    {x, a.down.u, a.down.v, a.up.u, a.up.v, a.s}, 1e-5);
    CHECK(probed.max_rel_error < 1e-6);
  }
  SUBCASE("width mismatch") { CHECK_THROWS_AS(adapter_forward(randn({2, 8}, rng), random_adapter(16, 4, rng)), DimensionError); }
}

TEST_CASE("adapter_param_count") {
  const auto c = adapter_param_count(768, 768, 16);
  CHECK(c.fullrank == 589824);
  CHECK(c.lowrank == 24576);
  CHECK(std::round(c.reduction * 10000.0) / 10000.0 == 0.9583);
  const auto sq = adapter_param_count(32, 32, 32);
  CHECK(sq.lowrank == 2 * 32 * 32);
  CHECK(sq.lowrank >= sq.fullrank);
  CHECK(sq.reduction <= 0.0);
  CHECK_THROWS_AS(adapter_param_count(0, 4, 1), ConfigError);
  Rng rng(6);
  CHECK(LowRankAdapter::create(24, 4, rng).parameter_count() == adapter_scalar_count(24, 4));
}

TEST_CASE("insert_adapters") {
  const std::int64_t m = 16, r = 4;
  Rng rng(7);
  auto base = ViTBlock::create(m, 2, 32, rng, true);
  auto x = randn({2, 5, m}, rng);

  SUBCASE("s = 0 leaves the block output bit-identical") {
    auto plain = block_forward(x, base);
    Rng ar(8);
    auto adapted = insert_adapters(base, r, 0.0, ar);
    adapted.adapter_attn->up.u = make_param({m, r}, ar, 1.0, true);
    adapted.adapter_mlp->up.u = make_param({m, r}, ar, 1.0, true);
    CHECK(bit_equal(block_forward(x, adapted).data(), plain.data()));
  }
  SUBCASE("trainable scalars match the closed form; partition is exhaustive and disjoint") {
    ParamList before;
    base.collect(before, "");
    const auto total_before = count_scalars(before, true) + count_scalars(before, false);
    Rng ar(9);
    auto adapted = insert_adapters(base, r, 1.0, ar);
    ParamList params;
    adapted.collect(params, "block.");
    CHECK(count_scalars(params, true) == 2 * ((m + r) * r * 2 + 1));
    CHECK(count_scalars(params, false) == total_before);
    std::set<std::string> names;
    std::int64_t all = 0;
    for (const auto& p : params) {
      names.insert(p.name);
      all += p.tensor.numel();
    }
    CHECK(names.size() == params.size());
    CHECK(all == count_scalars(params, true) + count_scalars(params, false));
  }
  SUBCASE("double insertion is rejected") {
    Rng ar(10);
    auto adapted = insert_adapters(base, r, 1.0, ar);
    CHECK_THROWS_AS(insert_adapters(adapted, r, 1.0, ar), ConfigError);
  }
  SUBCASE("one optimization step leaves frozen weights bit-identical") {
    Rng ar(11);
    auto adapted = insert_adapters(base, r, 1.0, ar);
    ParamList params;
    adapted.collect(params, "");
    std::vector<std::vector<double>> frozen;
    for (const auto& p : params)
      if (!p.tensor.requires_grad()) frozen.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    probe(block_forward(x, adapted)).backward();
    bool moved = false;
    for (auto& p : params) {
      if (!p.tensor.requires_grad()) {
        CHECK_FALSE(p.tensor.has_grad());
        continue;
      }
      auto g = p.tensor.grad_data();
      auto d = p.tensor.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] -= 0.1 * g[i];
        moved = moved || g[i] != 0.0;
      }
    }
    CHECK(moved);
    std::size_t k = 0;
    for (const auto& p : params)
      if (!p.tensor.requires_grad()) CHECK(bit_equal(p.tensor.data(), frozen[k++]));
  }
}

TEST_CASE("adapted block gradients") {
  Rng rng(12);
  auto block = insert_adapters(ViTBlock::create(8, 2, 16, rng, true), 2, 0.8, rng);
  // O(1) factors so finite differences are not swamped by round-off.
  block.adapter_attn = random_adapter(8, 2, rng);
  block.adapter_mlp = random_adapter(8, 2, rng);
  auto x = randn({1, 4, 8}, rng);
  ParamList params;
  block.collect(params, "");
  std::vector<Tensor> trainable;
  for (const auto& p : params)
    if (p.tensor.requires_grad()) trainable.push_back(p.tensor);
  auto res = grad_check_params([&] { return probe(block_forward(x, block)); }, trainable, 1e-5);
  INFO("worst coordinate " << res.worst_index << " of " << res.coordinates);
  CHECK(res.max_rel_error < 1e-5);
}
