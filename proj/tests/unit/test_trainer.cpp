#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <limits>
#include <random>

#include "metricforge/errors.hpp"
#include "metricforge/synth.hpp"
#include "metricforge/trainer.hpp"
#include "oracles.hpp"

using namespace metricforge;

namespace {

TrainConfig tiny_train_config() {
  TrainConfig cfg;
  cfg.model.channels = {4, 8};
  cfg.model.blocks = {1, 1};
  cfg.model.se_stages = {1};
  cfg.model.se_reduction = 2;
  cfg.model.embedding_dim = 8;
  cfg.P = 2;
  cfg.K = 2;
  cfg.pretrain_epochs = 1;
  cfg.epochs = 1;
  cfg.adam.lr = 1e-3;
  return cfg;
}

// Four speakers, three short utterances each.
struct ToyCorpus {
  testutil::TempDir dir{"toy"};
  Dataset dataset;
  ToyCorpus() {
    SynthConfig s;
    s.num_speakers = 4;
    s.heldout_speakers = 0;
    s.utts_per_speaker = 3;
    s.duration_s = 3.2;
    s.seed = 5;
    dataset = read_manifest(gen_corpus(dir.path(), s).train_manifest);
  }
};

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old, had_ = true;
    ::setenv(name, value, 1);
  }
  ~ScopedEnv() {
    if (had_) ::setenv(name_, old_.c_str(), 1);
    else ::unsetenv(name_);
  }

 private:
  const char* name_;
  std::string old_;
  bool had_ = false;
};

ParamSet scalar_param(double value) {
  ParamSet p;
  p.add("theta", Tensor(Shape{1}, {value}));
  return p;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("Adam with zero gradients leaves parameters unchanged") {
    ParamSet p = scalar_param(1.25);
    auto state = AdamState::for_params(p, {});
    adam_step(p, {{0.0}}, state);
    CHECK(p.at("theta").item() == 1.25);
    CHECK(state.step == 1);
  }

  TEST_CASE("Adam with zero learning rate leaves parameters unchanged") {
    ParamSet p = scalar_param(-0.5);
    AdamConfig cfg;
    cfg.lr = 0.0;
    auto state = AdamState::for_params(p, cfg);
    for (int i = 0; i < 5; ++i) adam_step(p, {{0.7 * i - 1}}, state);
    CHECK(p.at("theta").item() == -0.5);
    CHECK(state.step == 5);
  }

  TEST_CASE("Adam under a constant gradient follows the closed form") {
    for (double g : {0.3, -2.0, 1e-3}) {
      ParamSet p = scalar_param(2.0);
      AdamConfig cfg;
      cfg.lr = 0.01;
      auto state = AdamState::for_params(p, cfg);
      for (std::size_t t = 1; t <= 50; ++t) {
        adam_step(p, {{g}}, state);
        CHECK(p.at("theta").item() == doctest::Approx(oracle::adam_constant_gradient(2.0, g, cfg.lr, cfg.eps, t)).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("a non-finite gradient aborts and names the parameter") {
    ParamSet p = scalar_param(1.0);
    p.add("other", Tensor(Shape{2}, {0.0, 0.0}));
    auto state = AdamState::for_params(p, {});
    try {
      adam_step(p, {{0.1}, {0.0, std::numeric_limits<double>::quiet_NaN()}}, state);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("other") != std::string::npos);
    }
    CHECK(p.at("theta").item() == 1.0);
    CHECK(state.step == 0);
  }

  TEST_CASE("pretraining optimizes softmax only") {
    TrainConfig cfg;
    const LossWeights pre = phase_weights(cfg, Phase::pretrain_softmax);
    CHECK(pre.lambda_tri == 0.0);
    CHECK(pre.lambda_npair == 0.0);
    CHECK(pre.lambda_ang == 0.0);
    CHECK(pre.lambda_soft > 0.0);
    const LossWeights multi = phase_weights(cfg, Phase::multi_loss);
    CHECK(multi.lambda_npair == 0.5);
    CHECK(multi.lambda_soft == 0.1);
    CHECK(multi.lambda_tri == 1.0);
    CHECK(multi.lambda_ang == 1.0);
  }

  TEST_CASE("configuration validation") {
    TrainConfig cfg = tiny_train_config();
    cfg.weights = LossWeights{0, 0, 0, 0};
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg.epochs = 0;
    CHECK_NOTHROW(cfg.validate());
    cfg = tiny_train_config();
    cfg.K = 1;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
  }

  TEST_CASE("per-item gradient replicas agree with a single shared graph") {
    TrainConfig cfg = tiny_train_config();
    cfg.model.num_classes = 3;
    const ParamSet params = init_params(cfg.model, 3);
    std::mt19937_64 rng(3);
    std::vector<FeatureCrop> crops(6);
    for (auto& c : crops) c.data = testutil::random_values(3 * FeatureCrop::plane_size(), rng, -2, 2);
    const std::vector<std::size_t> labels{0, 0, 1, 1, 2, 2};
    const LossWeights w;

    const StepOutcome out = compute_step(cfg.model, params, crops, labels, w);

    const ParamSet shared = params.replicate(true);
    std::vector<Tensor> raws;
    for (const auto& c : crops) raws.push_back(forward(c.to_tensor(), cfg.model, shared).raw);
    BatchOutputs b;
    b.raw = stack_rows(raws);
    b.normalized = l2_normalize_rows(b.raw);
    b.logits = classify(b.raw, cfg.model, shared);
    b.class_labels = labels;
    b.triplets = mine_semi_hard(b.normalized.detach(), labels);
    b.npair = build_npair(labels);
    LossBreakdown ref = combined_loss(b, w);
    CHECK(out.loss.total_value == doctest::Approx(ref.total_value).epsilon(1e-12));
    ref.total.backward();

    REQUIRE(out.grads.size() == shared.size());
    for (std::size_t i = 0; i < shared.size(); ++i) {
      const auto& [name, t] = shared.entries()[i];
      REQUIRE(t.has_grad());
      for (std::size_t k = 0; k < t.numel(); ++k) {
        INFO(name);
        CHECK(out.grads[i][k] == doctest::Approx(t.grad()[k]).epsilon(1e-9).scale(1e-12));
      }
    }
  }

  TEST_CASE("zero epochs returns the initialization") {
    ToyCorpus corpus;
    TrainConfig cfg = tiny_train_config();
    cfg.pretrain_epochs = 0;
    cfg.epochs = 0;
    const TrainResult r = train(corpus.dataset, cfg);
    BackboneConfig model = cfg.model;
    model.num_classes = corpus.dataset.speakers.size();
    CHECK(r.checkpoint.params == init_params(model, cfg.seed));
    CHECK(r.steps.empty());
  }

  TEST_CASE("training writes logs and checkpoints and is reproducible across thread counts") {
    ToyCorpus corpus;
    testutil::TempDir out("trainout");
    const TrainConfig cfg = tiny_train_config();
    std::string logs[2];
    ParamSet finals[2];
    const char* threads[] = {"1", "3"};
    for (int run = 0; run < 2; ++run) {
      ScopedEnv env("METRICFORGE_THREADS", threads[run]);
      const auto dir = out / ("run" + std::to_string(run));
      const TrainResult r = train(corpus.dataset, cfg, {dir, {}});
      logs[run] = testutil::read_file(dir / "metrics.csv");
      finals[run] = load_checkpoint(dir / "model").params;
      CHECK(r.steps.size() == 2 * batches_per_epoch(12, 2, 2));
      CHECK(std::filesystem::exists(dir / "checkpoints/epoch_001/checkpoint.json"));
      CHECK(std::filesystem::exists(dir / "checkpoints/epoch_002/checkpoint.json"));
      CHECK(r.steps.front().phase == Phase::pretrain_softmax);
      CHECK(r.steps.front().total == r.steps.front().softmax);
      CHECK(r.steps.back().phase == Phase::multi_loss);
      for (const auto& m : r.steps) CHECK(std::isfinite(m.total));
    }
    CHECK(logs[0].rfind(std::string(kMetricsHeader) + "\n", 0) == 0);
    CHECK(logs[0] == logs[1]);
    CHECK(finals[0] == finals[1]);
  }

  TEST_CASE("too few speakers for P is a data error") {
    ToyCorpus corpus;
    TrainConfig cfg = tiny_train_config();
    cfg.P = 5;
    CHECK_THROWS_AS(train(corpus.dataset, cfg), DataError);
  }
}
