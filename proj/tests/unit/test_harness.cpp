#include <cmath>
#include <cstdio>
#include <filesystem>

#include "balr/checkpoint.hpp"
#include "balr/errors.hpp"
#include "balr/grad_check.hpp"
#include "balr/harness.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace balr;
using balr::testing::bit_equal;

namespace {

HarnessConfig small_config() {
  HarnessConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 24;
  c.depth = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.adapter_rank = 4;
  c.attn_ranks = {4, 4, 4};
  c.cden_channels = {8, 8, 8, 8, 8};
  c.head_channels = 4;
  return c;
}

Tensor test_image(const HarnessConfig& c, std::int64_t n = 2, std::uint64_t seed = 5) {
  Rng rng(seed);
  return randn({n, c.in_channels, c.image_size, c.image_size}, rng);
}

bool starts_with(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

TEST_CASE("harness config text") {
  SUBCASE("round trip") {
    auto c = small_config();
    c.use_cden = false;
    c.adapter_s_init = 0.1;
    c.cden_fuse_e2 = true;
    const auto back = parse_harness_config(c.to_text());
    CHECK(back.to_text() == c.to_text());
    CHECK(back.adapter_s_init == 0.1);
  }
  SUBCASE("comments and missing keys keep defaults") {
    const auto c = parse_harness_config("# tiny\nembed_dim = 96 ; inline\n\nheads = 4\n");
    CHECK(c.embed_dim == 96);
    CHECK(c.heads == 4);
    CHECK(c.depth == HarnessConfig{}.depth);
  }
  SUBCASE("unknown key reports its position") {
    try {
      parse_harness_config("depth = 2\n  widht = 3\n");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.line() == 2);
      CHECK(e.column() == 3);
    }
  }
  SUBCASE("malformed values report the value column") {
    try {
      parse_harness_config("depth = two\n");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.line() == 1);
      CHECK(e.column() == 9);
    }
    CHECK_THROWS_AS(parse_harness_config("attn_ranks = 4, 4\n"), FormatError);
    CHECK_THROWS_AS(parse_harness_config("use_cden = maybe\n"), FormatError);
    CHECK_THROWS_AS(parse_harness_config("depth 2\n"), FormatError);
    CHECK_THROWS_AS(parse_harness_config("depth = 2\ndepth = 3\n"), FormatError);
    CHECK_THROWS_AS(parse_harness_config("[model]\ndepth = 2\n"), FormatError);
  }
  SUBCASE("out-of-range values") {
    CHECK_THROWS_AS(parse_harness_config("patch_size = 12\n"), ConfigError);
    CHECK_THROWS_AS(parse_harness_config("embed_dim = 100\nheads = 6\n"), ConfigError);
    CHECK_THROWS_AS(parse_harness_config("attn_ranks = 3, 4, 4\n"), ConfigError);
    CHECK_THROWS_AS(parse_harness_config("image_size = 120\npatch_size = 8\n"), ConfigError);
  }
}

TEST_CASE("every flag combination builds and trains") {
  for (int mask = 0; mask < 8; ++mask) {
    auto c = small_config();
    c.use_adapters = mask & 1;
    c.use_cden = mask & 2;
    c.use_lr_attention = mask & 4;
    CAPTURE(mask);
    const auto m = build_balr_model(c, 1);
    const auto logits = forward_segment(m, test_image(c));
    CHECK(logits.shape() == Shape{2, 1, 32, 32});
    CHECK(all_finite(logits));
    mean(logits).backward();
    for (const auto& p : m.parameters()) {
      CAPTURE(p.name);
      if (p.tensor.requires_grad()) {
        REQUIRE(p.tensor.has_grad());
        CHECK(all_finite(p.tensor.grad()));
      }
      const bool adapter = p.name.find("adapter_") != std::string::npos;
      const bool lr = p.name.find(".p_") != std::string::npos || p.name.find(".b_") != std::string::npos;
      const bool expect = starts_with(p.name, "head.") || starts_with(p.name, "cden.") || adapter || lr;
      CHECK(p.tensor.requires_grad() == expect);
    }

    const auto split = trainable_parameter_split(m);
    const auto closed = count_parameters(c).split();
    CHECK(split.frozen == closed.frozen);
    CHECK(split.trainable == closed.trainable);
  }
}

TEST_CASE("closed-form counts match enumeration for variants") {
  auto c = small_config();
  SUBCASE("E2 fused") { c.cden_fuse_e2 = true; }
  SUBCASE("self-attention only") { c.lr_cross_attention = false; }
  SUBCASE("no RoPE, uneven ranks") {
    c.rope_enabled = false;
    c.attn_ranks = {3, 5, 2};
  }
  SUBCASE("patch 4") {
    c.patch_size = 4;
    c.decoder_depth = 1;
  }
  const auto m = build_balr_model(c, 3);
  const auto split = trainable_parameter_split(m);
  const auto b = count_parameters(c);
  CHECK(split.frozen == b.split().frozen);
  CHECK(split.trainable == b.split().trainable);
  std::int64_t cden = 0, head = 0;
  for (const auto& p : m.parameters()) {
    if (starts_with(p.name, "cden.")) cden += p.tensor.numel();
    if (starts_with(p.name, "head.")) head += p.tensor.numel();
  }
  CHECK(cden == b.cden);
  CHECK(head == b.head);
  const auto logits = forward_segment(m, test_image(c, 1));
  CHECK(logits.shape() == Shape{1, 1, 32, 32});
}

TEST_CASE("default configuration") {
  const HarnessConfig c;
  const auto m = build_balr_model(c, 0);
  const auto split = trainable_parameter_split(m);
  CHECK(split.fraction() <= 0.10);
  CHECK(split.fraction() > 0.0);
  CHECK(split.trainable == count_parameters(c).split().trainable);
  const auto logits = forward_segment(m, test_image(c, 1));
  CHECK(logits.shape() == Shape{1, 1, 128, 128});

  auto c64 = c;
  c64.image_size = 64;
  const auto m64 = build_balr_model(c64, 0);
  CHECK(forward_segment(m64, test_image(c64, 1)).shape() == Shape{1, 1, 64, 64});
}

TEST_CASE("all flags off leaves only the head trainable") {
  auto c = small_config();
  c.use_adapters = c.use_cden = c.use_lr_attention = false;
  const auto m = build_balr_model(c, 2);
  for (const auto& p : m.parameters()) CHECK(p.tensor.requires_grad() == starts_with(p.name, "head."));
  const auto b = count_parameters(c);
  CHECK(b.adapters == 0);
  CHECK(b.cden == 0);
  CHECK(b.lr_attention == 0);
  CHECK(b.split().trainable == b.head);
}

TEST_CASE("construction is deterministic per seed and per component") {
  const auto c = small_config();
  const auto image = test_image(c);
  const auto a = forward_segment(build_balr_model(c, 11), image);
  const auto b = forward_segment(build_balr_model(c, 11), image);
  CHECK(bit_equal(a.data(), b.data()));
  const auto other = forward_segment(build_balr_model(c, 12), image);
  CHECK_FALSE(bit_equal(a.data(), other.data()));

  auto off = c;
  off.use_adapters = false;
  const auto m1 = build_balr_model(c, 11), m0 = build_balr_model(off, 11);
  CHECK(bit_equal(m1.blocks[0].attn.w_q.data(), m0.blocks[0].attn.w_q.data()));
  CHECK(bit_equal(m1.head.hyper.weight.data(), m0.head.hyper.weight.data()));
  CHECK(bit_equal(m1.cden->fuse.weight.data(), m0.cden->fuse.weight.data()));
}

TEST_CASE("a zero CDEN gate reproduces the model without CDEN") {
  auto c = small_config();
  auto m = build_balr_model(c, 4);
  Tensor(m.cden_gate).mutable_data()[0] = 0.0;
  auto without = c;
  without.use_cden = false;
  const auto image = test_image(c);
  const auto a = forward_segment(m, image);
  const auto b = forward_segment(build_balr_model(without, 4), image);
  CHECK(bit_equal(a.data(), b.data()));
}

TEST_CASE("forward rejects mismatched images") {
  const auto c = small_config();
  const auto m = build_balr_model(c, 0);
  Rng rng(0);
  CHECK_THROWS_AS(forward_segment(m, randn({1, 3, 48, 48}, rng)), DimensionError);
  CHECK_THROWS_AS(forward_segment(m, randn({1, 1, 32, 32}, rng)), DimensionError);
  CHECK_THROWS_AS(forward_segment(m, randn({3, 32, 32}, rng)), DimensionError);
}

TEST_CASE("end-to-end gradients") {
  const auto c = small_config();
  const auto m = build_balr_model(c, 6);
  SUBCASE("input pixels") {
    auto image = test_image(c, 1);
    image.set_requires_grad(true);
    const auto res = grad_check_params([&] { return mean(forward_segment(m, image)); }, {image}, 1e-5, 3);
    CHECK(res.coordinates == 3);
    CHECK(res.max_rel_error < 1e-4);
  }
  SUBCASE("trainable parameters") {
    const auto image = test_image(c, 1);
    const auto res =
        grad_check_params([&] { return testing::probe(forward_segment(m, image)); }, m.trainable(), 1e-5, 2);
    INFO("worst " << res.worst_index << " of " << res.coordinates);
    CHECK(res.max_rel_error < 1e-4);
  }
}

TEST_CASE("optimizer steps leave frozen weights untouched") {
  const auto c = small_config();
  const auto m = build_balr_model(c, 8);
  std::vector<std::vector<double>> before;
  for (const auto& p : m.parameters()) before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  const auto image = test_image(c);
  for (int step = 0; step < 3; ++step) {
    for (auto& t : m.trainable()) t.zero_grad();
    mean(square(forward_segment(m, image))).backward();
    for (auto t : m.trainable()) {
      auto d = t.mutable_data();
      const auto g = t.grad_data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= 0.1 * g[i];
    }
  }
  const auto params = m.parameters();
  std::int64_t changed = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const bool same = bit_equal(params[i].tensor.data(), before[i]);
    if (!params[i].tensor.requires_grad()) {
      CAPTURE(params[i].name);
      CHECK(same);
    } else if (!same) {
      ++changed;
    }
  }
  CHECK(changed > 0);
}

TEST_CASE("checkpoint round trip") {
  const auto c = small_config();
  auto m = build_balr_model(c, 9);
  for (auto t : m.trainable()) {
    Rng rng(3);
    for (auto& v : t.mutable_data()) v += 0.01 * rng.normal();
  }
  const auto path = (std::filesystem::temp_directory_path() / "balr_harness_test.ckpt").string();
  save_checkpoint(m, path);
  const auto back = load_checkpoint(path);
  std::filesystem::remove(path);
  const auto a = m.parameters(), b = back.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CAPTURE(a[i].name);
    CHECK(a[i].name == b[i].name);
    CHECK(bit_equal(a[i].tensor.data(), b[i].tensor.data()));
    CHECK(a[i].tensor.requires_grad() == b[i].tensor.requires_grad());
  }
  const auto image = test_image(c);
  CHECK(bit_equal(forward_segment(m, image).data(), forward_segment(back, image).data()));

  auto bytes = serialize_model(m);
  SUBCASE("bad magic") {
    bytes[0] = 'X';
    CHECK_THROWS_AS(deserialize_model(bytes), FormatError);
  }
  SUBCASE("truncated") {
    bytes.resize(bytes.size() - 5);
    CHECK_THROWS_AS(deserialize_model(bytes), FormatError);
  }
  SUBCASE("trailing bytes") {
    bytes.push_back(0);
    CHECK_THROWS_AS(deserialize_model(bytes), FormatError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), FormatError); }
}

TEST_CASE("copy_parameters restores a snapshot") {
  const auto c = small_config();
  const auto src = build_balr_model(c, 1);
  auto dst = build_balr_model(c, 2);
  copy_parameters(src, dst);
  const auto image = test_image(c);
  CHECK(bit_equal(forward_segment(src, image).data(), forward_segment(dst, image).data()));
  auto other = c;
  other.use_cden = false;
  auto mismatch = build_balr_model(other, 1);
  CHECK_THROWS_AS(copy_parameters(src, mismatch), ConfigError);
}

TEST_CASE("SAM-scale extrapolation") {
  const auto cfg = sam_vit_h_config();
  CHECK(cfg.embed_dim == 1280);
  CHECK(cfg.depth == 32);
  const auto e = sam_scale_extrapolation(cfg);
  CHECK(e.breakdown.adapters == 32 * 2 * (2 * (1280 + 16) * 16 + 1));
  CHECK(e.breakdown.lr_attention == 2 * 2 * 2 * 1280 * 24);
  CHECK(e.trainable == e.breakdown.adapters + e.breakdown.lr_attention + e.breakdown.cden + e.breakdown.head);
  CHECK(e.fraction_of_reference > 0.0);
  CHECK(e.fraction_of_reference <= 0.05);
  // ViT-H/16 encoder alone is roughly 630M frozen parameters.
  CHECK(e.breakdown.encoder_frozen > 600000000);
  CHECK(e.breakdown.encoder_frozen < 660000000);
}
