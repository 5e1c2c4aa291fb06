#include "metricforge/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "metricforge/errors.hpp"
#include "metricforge/parallel.hpp"

namespace metricforge {

namespace fs = std::filesystem;

// -- Adam -------------------------------------------------------------------------

AdamState AdamState::for_params(const ParamSet& params, const AdamConfig& config) {
  AdamState state;
  state.config = config;
  for (const auto& [name, t] : params.entries()) {
    state.first_moment.emplace_back(t.numel(), 0.0);
    state.second_moment.emplace_back(t.numel(), 0.0);
  }
  return state;
}

void adam_step(ParamSet& params, const GradientSet& grads, AdamState& state) {
  auto& entries = params.entries();
  if (grads.size() != entries.size() || state.first_moment.size() != entries.size()) {
    throw ContractError("adam_step: gradient/state count does not match parameters");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, t] = entries[i];
    if (grads[i].size() != t.numel() || state.first_moment[i].size() != t.numel()) {
      throw ContractError("adam_step: gradient shape mismatch for " + name);
    }
    for (double g : grads[i])
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in parameter " + name);
  }

  const auto& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto values = entries[i].second.mutable_values();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      const double m_hat = m[k] / correct1;
      const double v_hat = v[k] / correct2;
      values[k] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

// -- configuration ----------------------------------------------------------------

std::string to_string(Phase phase) { return phase == Phase::pretrain_softmax ? "pretrain_softmax" : "multi_loss"; }

void TrainConfig::validate() const {
  model.validate();
  weights.validate();
  if (P < 2 || K < 2) throw ContractError("train: P and K must both be at least 2");
  if (!(adam.lr >= 0)) throw ContractError("train: learning rate must be non-negative");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1)) {
    throw ContractError("train: Adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0)) throw ContractError("train: Adam epsilon must be positive");
  const bool any_metric = weights.lambda_npair > 0 || weights.lambda_tri > 0 || weights.lambda_ang > 0 ||
                          weights.lambda_soft > 0;
  if (epochs > 0 && !any_metric) throw ContractError("train: every loss weight is zero; nothing to optimize");
}

LossWeights phase_weights(const TrainConfig& cfg, Phase phase) {
  LossWeights w = cfg.weights;
  if (phase == Phase::pretrain_softmax) {
    w.lambda_npair = 0.0;
    w.lambda_tri = 0.0;
    w.lambda_ang = 0.0;
    w.lambda_soft = 1.0;
  }
  return w;
}

std::string format_metrics_row(const StepMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%s,%.17g,%.17g,%.17g,%.17g,%.17g", m.step, m.epoch, to_string(m.phase).c_str(),
                m.total, m.triplet, m.npair, m.angular, m.softmax);
  return buf;
}

// -- one step ---------------------------------------------------------------------

namespace {

bool is_classifier(const std::string& name) { return name.rfind("classifier.", 0) == 0; }

ParamSet backbone_params(const ParamSet& params) {
  ParamSet out;
  for (const auto& [name, t] : params.entries())
    if (!is_classifier(name)) out.add(name, t);
  return out;
}

}  // namespace

StepOutcome compute_step(const BackboneConfig& model, const ParamSet& params, const std::vector<FeatureCrop>& crops,
                         const std::vector<std::size_t>& labels, const LossWeights& weights) {
  const std::size_t batch = crops.size();
  if (labels.size() != batch) throw ContractError("compute_step: one label per crop required");
  const std::size_t dim = model.embedding_dim;

  const ParamSet backbone = backbone_params(params);
  std::vector<ParamSet> replicas(batch);
  std::vector<EmbeddingOutput> outputs(batch);
  parallel_for(batch, [&](std::size_t i) {
    replicas[i] = backbone.replicate(true);
    outputs[i] = forward(crops[i].to_tensor(), model, replicas[i]);
  });

  std::vector<double> stacked;
  stacked.reserve(batch * dim);
  for (const auto& o : outputs) stacked.insert(stacked.end(), o.raw.values().begin(), o.raw.values().end());
  Tensor raw(Shape{batch, dim}, std::move(stacked), true);

  BatchOutputs bo;
  bo.raw = raw;
  bo.normalized = l2_normalize_rows(raw);
  ParamSet head;
  if (model.num_classes > 0) {
    head = params.select("classifier.").replicate(true);
    bo.logits = classify(raw, model, head);
    bo.class_labels = labels;
  }
  bo.triplets = mine_semi_hard(bo.normalized.detach(), labels);
  bo.npair = build_npair(labels);

  StepOutcome outcome;
  outcome.loss = combined_loss(bo, weights);
  if (!std::isfinite(outcome.loss.total_value)) throw NumericError("compute_step: loss is not finite");
  outcome.loss.total.backward();

  const auto upstream = raw.grad();
  parallel_for(batch, [&](std::size_t i) {
    Tensor seed(Shape{1, dim}, std::vector<double>(upstream.begin() + static_cast<std::ptrdiff_t>(i * dim),
                                                   upstream.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim)));
    sum(outputs[i].raw * seed).backward();
    outputs[i] = {};
  });

  // Reduce per-item gradients in item order so the result is schedule independent.
  for (const auto& [name, t] : params.entries()) {
    std::vector<double> g(t.numel(), 0.0);
    if (is_classifier(name)) {
      const Tensor& h = head.at(name);
      if (h.has_grad()) g.assign(h.grad().begin(), h.grad().end());
    } else {
      for (const auto& r : replicas) {
        const Tensor& p = r.at(name);
        if (!p.has_grad()) continue;
        const auto pg = p.grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += pg[k];
      }
    }
    outcome.grads.push_back(std::move(g));
  }
  return outcome;
}

// -- training loop ----------------------------------------------------------------

namespace {

fs::path epoch_dir(const fs::path& out, std::size_t epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "epoch_%03zu", epoch);
  return out / "checkpoints" / name;
}

}  // namespace

TrainResult train(const Dataset& dataset, const TrainConfig& cfg_in, const TrainOptions& options) {
  TrainConfig cfg = cfg_in;
  cfg.model.num_classes = dataset.speakers.size();
  cfg.validate();
  if (dataset.size() == 0) throw DataError("train: empty dataset");

  TrainResult result;
  result.checkpoint.model = cfg.model;
  result.checkpoint.features = cfg.features;
  result.checkpoint.params = init_params(cfg.model, cfg.seed);
  ParamSet& params = result.checkpoint.params;
  AdamState adam = AdamState::for_params(params, cfg.adam);

  std::seed_seq seq{cfg.seed, std::uint64_t{0x5eed}};
  std::mt19937_64 rng(seq);

  std::ofstream metrics;
  const bool persist = !options.out_dir.empty();
  if (persist) {
    fs::create_directories(options.out_dir);
    metrics.open(options.out_dir / "metrics.csv", std::ios::trunc);
    if (!metrics) throw DataError("cannot write " + (options.out_dir / "metrics.csv").string());
    metrics << kMetricsHeader << '\n';
  }

  const std::size_t per_epoch = batches_per_epoch(dataset.size(), cfg.P, cfg.K);
  std::size_t step = 0, epoch = 0;
  const std::pair<Phase, std::size_t> schedule[] = {{Phase::pretrain_softmax, cfg.pretrain_epochs},
                                                    {Phase::multi_loss, cfg.epochs}};
  for (const auto& [phase, phase_epochs] : schedule) {
    const LossWeights weights = phase_weights(cfg, phase);
    for (std::size_t e = 0; e < phase_epochs; ++e) {
      ++epoch;
      const auto started = std::chrono::steady_clock::now();
      double epoch_total = 0.0;
      for (std::size_t b = 0; b < per_epoch; ++b) {
        const PKBatch batch = sample_pk(dataset, cfg.P, cfg.K, rng);
        std::vector<Waveform> crops;
        crops.reserve(batch.items.size());
        for (auto item : batch.items) crops.push_back(crop_3s(read_wav(dataset.utterances[item].path), rng));
        std::vector<FeatureCrop> features(crops.size());
        parallel_for(crops.size(), [&](std::size_t i) { features[i] = extract_features(crops[i], cfg.features); });

        StepOutcome outcome = compute_step(cfg.model, params, features, batch.labels, weights);
        adam_step(params, outcome.grads, adam);

        StepMetrics m{++step,
                      epoch,
                      phase,
                      outcome.loss.total_value,
                      outcome.loss.triplet,
                      outcome.loss.npair,
                      outcome.loss.angular,
                      outcome.loss.softmax};
        epoch_total += m.total;
        if (persist) metrics << format_metrics_row(m) << '\n' << std::flush;
        result.steps.push_back(m);
      }
      EpochSummary summary{epoch, phase, epoch_total / static_cast<double>(per_epoch),
                           std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()};
      result.epochs.push_back(summary);
      if (persist && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
        save_checkpoint(epoch_dir(options.out_dir, epoch), result.checkpoint);
      }
      if (options.on_epoch) options.on_epoch(summary);
    }
  }

  if (persist) save_checkpoint(options.out_dir / "model", result.checkpoint);
  return result;
}

}  // namespace metricforge
