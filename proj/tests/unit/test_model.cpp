#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "metricforge/checkpoint.hpp"
#include "metricforge/errors.hpp"
#include "metricforge/gradcheck.hpp"
#include "metricforge/model.hpp"
#include "oracles.hpp"

using namespace metricforge;

namespace {

BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.channels = {4, 8};
  cfg.blocks = {1, 2};
  cfg.se_stages = {0, 1};
  cfg.se_reduction = 2;
  cfg.embedding_dim = 6;
  cfg.num_classes = 3;
  cfg.input_frames = 13;
  cfg.input_bins = 10;
  return cfg;
}

Tensor random_input(const BackboneConfig& cfg, std::mt19937_64& rng, bool grad = false) {
  const Shape shape{cfg.input_channels, cfg.input_frames, cfg.input_bins};
  return Tensor(shape, testutil::random_values(shape_numel(shape), rng, -2.0, 2.0), grad);
}

SEBlockParams random_se(std::size_t c, std::size_t r, std::mt19937_64& rng, bool grad = false) {
  const auto make = [&](Shape s) { return Tensor(s, testutil::random_values(shape_numel(s), rng), grad); };
  return {make({c / r, c, 1, 1}), make({c / r}), make({c, c / r, 1, 1}), make({c})};
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("SE block with zero parameters scales by exactly 1.5") {
    std::mt19937_64 rng(1);
    const std::size_t c = 8;
    const Tensor f(Shape{c, 5, 3}, testutil::random_values(c * 15, rng));
    const SEBlockParams zero{Tensor(Shape{2, c, 1, 1}), Tensor(Shape{2}), Tensor(Shape{c, 2, 1, 1}), Tensor(Shape{c})};
    const Tensor out = se_block(f, zero);
    CHECK(out.shape() == f.shape());
    for (std::size_t i = 0; i < f.numel(); ++i) CHECK(out.at(i) == 1.5 * f.at(i));
  }

  TEST_CASE("SE block maps zero features to zero") {
    std::mt19937_64 rng(2);
    const Tensor f(Shape{4, 3, 3});
    const Tensor out = se_block(f, random_se(4, 2, rng));
    for (double v : out.values()) CHECK(v == 0.0);
  }

  TEST_CASE("SE block residual equals features times an attention map in (0,1)") {
    std::mt19937_64 rng(3);
    const std::size_t c = 6, r = 3, h = 4, w = 5, mid = c / r;
    const Tensor f(Shape{c, h, w}, testutil::random_values(c * h * w, rng, -3, 3));
    const SEBlockParams p = random_se(c, r, rng);
    const Tensor out = se_block(f, p);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const auto fv = [&](std::size_t ch) { return f.at((ch * h + y) * w + x); };
        std::vector<double> z(mid);
        for (std::size_t j = 0; j < mid; ++j) {
          double s = p.squeeze_bias.at(j);
          for (std::size_t ch = 0; ch < c; ++ch) s += p.squeeze_weight.at(j * c + ch) * fv(ch);
          z[j] = std::max(0.0, s);
        }
        for (std::size_t ch = 0; ch < c; ++ch) {
          double s = p.excite_bias.at(ch);
          for (std::size_t j = 0; j < mid; ++j) s += p.excite_weight.at(ch * mid + j) * z[j];
          const double m = 1.0 / (1.0 + std::exp(-s));
          CHECK(m > 0.0);
          CHECK(m < 1.0);
          const std::size_t idx = (ch * h + y) * w + x;
          CHECK(out.at(idx) - f.at(idx) == doctest::Approx(fv(ch) * m).epsilon(1e-12));
        }
      }
  }

  TEST_CASE("SE block keeps the input shape and rejects mismatched kernels") {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<std::size_t> extent(1, 7);
    for (int i = 0; i < 20; ++i) {
      const std::size_t c = 4 * extent(rng), h = extent(rng), w = extent(rng);
      const Tensor f(Shape{c, h, w}, testutil::random_values(c * h * w, rng));
      CHECK(se_block(f, random_se(c, 4, rng)).shape() == f.shape());
    }
    const Tensor f(Shape{8, 2, 2});
    CHECK_THROWS_AS(se_block(f, random_se(4, 2, rng)), ShapeError);
  }

  TEST_CASE("SE block gradients match finite differences") {
    std::mt19937_64 rng(5);
    const Tensor f(Shape{4, 3, 3}, testutil::random_values(36, rng), true);
    const SEBlockParams p = random_se(4, 2, rng);
    CHECK(finite_diff_check([&](const Tensor& x) { return sum(square(se_block(x, p))); }, f) < 1e-6);
    const Tensor fixed = f.detach();
    const auto& w = p.excite_weight;
    CHECK(finite_diff_check(
              [&](const Tensor& k) { return sum(square(se_block(fixed, {p.squeeze_weight, p.squeeze_bias, k, p.excite_bias}))); },
              w.detach(true)) < 1e-6);
  }

  TEST_CASE("embeddings have unit norm and are deterministic") {
    const BackboneConfig cfg = tiny_config();
    const ParamSet params = init_params(cfg, 7);
    std::mt19937_64 rng(6);
    for (int i = 0; i < 10; ++i) {
      const Tensor x = random_input(cfg, rng);
      const auto a = forward(x, cfg, params), b = forward(x, cfg, params);
      CHECK(a.normalized.shape() == Shape{1, cfg.embedding_dim});
      double n2 = 0.0;
      for (double v : a.normalized.values()) n2 += v * v;
      CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-9);
      CHECK(std::equal(a.normalized.values().begin(), a.normalized.values().end(), b.normalized.values().begin()));
    }
  }

  TEST_CASE("reordering inputs reorders embeddings") {
    const BackboneConfig cfg = tiny_config();
    const ParamSet params = init_params(cfg, 8);
    std::mt19937_64 rng(7);
    const std::vector<Tensor> xs{random_input(cfg, rng), random_input(cfg, rng), random_input(cfg, rng)};
    std::vector<std::vector<double>> forward_order, reverse_order(3);
    for (const auto& x : xs) {
      const Tensor e = forward(x, cfg, params).normalized;
      const auto v = e.values();
      forward_order.emplace_back(v.begin(), v.end());
    }
    for (std::size_t i = 3; i-- > 0;) {
      const Tensor e = forward(xs[i], cfg, params).normalized;
      const auto v = e.values();
      reverse_order[i].assign(v.begin(), v.end());
    }
    CHECK(forward_order == reverse_order);
  }

  TEST_CASE("initialization is seeded") {
    const BackboneConfig cfg = tiny_config();
    CHECK(init_params(cfg, 1) == init_params(cfg, 1));
    CHECK_FALSE(init_params(cfg, 1) == init_params(cfg, 2));
    const ParamSet p = init_params(cfg, 3);
    CHECK_NOTHROW(validate_params(cfg, p));
    CHECK(p.at("stage1.block1.prelu").values()[0] == 0.25);
  }

  TEST_CASE("default backbone gives finite outputs at initialization") {
    BackboneConfig cfg;
    cfg.num_classes = 5;
    const ParamSet params = init_params(cfg, 1);
    std::mt19937_64 rng(9);
    const auto out = forward(random_input(cfg, rng), cfg, params);
    CHECK(out.raw.shape() == Shape{1, 128});
    for (double v : out.raw.values()) CHECK(std::isfinite(v));
    const Tensor logits = classify(out.raw, cfg, params);
    CHECK(logits.shape() == Shape{1, 5});
    for (double v : logits.values()) CHECK(std::isfinite(v));
  }

  TEST_CASE("SE kernels receive gradient") {
    const BackboneConfig cfg = tiny_config();
    const ParamSet params = init_params(cfg, 10).replicate(true);
    std::mt19937_64 rng(10);
    const auto out = forward(random_input(cfg, rng), cfg, params);
    const Tensor target(Shape{1, cfg.embedding_dim}, testutil::random_values(cfg.embedding_dim, rng));
    sum(square(out.normalized - target)).backward();
    for (const char* name : {"stage0.se.squeeze.weight", "stage0.se.excite.weight", "stage1.se.squeeze.weight",
                             "stage1.se.excite.weight"}) {
      double g = 0.0;
      for (double v : params.at(name).grad()) g += std::abs(v);
      CHECK_MESSAGE(g > 0.0, name);
    }
  }

  TEST_CASE("whole-network gradient matches finite differences") {
    BackboneConfig cfg = tiny_config();
    cfg.input_frames = 7;
    cfg.input_bins = 6;
    const ParamSet params = init_params(cfg, 11);
    std::mt19937_64 rng(11);
    const Tensor x = random_input(cfg, rng, true);
    CHECK(finite_diff_check([&](const Tensor& t) { return sum(forward(t, cfg, params).normalized * forward(t, cfg, params).raw); },
                            x) < 1e-5);
  }

  TEST_CASE("configuration and parameter validation") {
    BackboneConfig cfg = tiny_config();
    cfg.se_reduction = 3;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg = tiny_config();
    cfg.embedding_dim = 1;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg = tiny_config();
    ParamSet other = init_params(tiny_config(), 1);
    cfg.embedding_dim = 7;
    CHECK_THROWS_AS(validate_params(cfg, other), ContractError);
    CHECK_THROWS_AS(forward(Tensor(Shape{3, 5, 5}), tiny_config(), other), ShapeError);
  }

  TEST_CASE("checkpoint round trip reproduces embeddings exactly") {
    testutil::TempDir dir("ckpt");
    const BackboneConfig cfg = tiny_config();
    const Checkpoint ck{cfg, {SpectrumKind::power, true, Normalization::none}, init_params(cfg, 13)};
    save_checkpoint(dir.path(), ck);
    const Checkpoint back = load_checkpoint(dir.path());
    CHECK(back.model == cfg);
    CHECK(back.params == ck.params);
    CHECK(back.features.spectrum == SpectrumKind::power);
    CHECK(back.features.log_compress);
    CHECK(back.features.norm == Normalization::none);
    std::mt19937_64 rng(13);
    const Tensor x = random_input(cfg, rng);
    const Tensor ea = forward(x, cfg, ck.params).normalized;
    const auto a = ea.values();
    const Tensor eb = forward(x, cfg, back.params).normalized;
    const auto b = eb.values();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }

  TEST_CASE("corrupt checkpoints are data errors") {
    testutil::TempDir dir("ckptbad");
    const BackboneConfig cfg = tiny_config();
    save_checkpoint(dir.path(), {cfg, {}, init_params(cfg, 14)});
    std::ofstream(dir / "params/head.bias.f64", std::ios::binary | std::ios::trunc) << "xx";
    CHECK_THROWS_AS(load_checkpoint(dir.path()), DataError);
    CHECK_THROWS_AS(load_checkpoint(dir / "nowhere"), DataError);
  }
}
