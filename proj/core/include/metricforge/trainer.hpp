#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "metricforge/audio.hpp"
#include "metricforge/batching.hpp"
#include "metricforge/checkpoint.hpp"
#include "metricforge/losses.hpp"
#include "metricforge/model.hpp"

namespace metricforge {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;

  static AdamState for_params(const ParamSet& params, const AdamConfig& config);
};

using GradientSet = std::vector<std::vector<double>>;

// Bias-corrected Adam update, in place. grads follow the parameter order.
// A non-finite gradient aborts with a NumericError naming the parameter and
// leaves params and state untouched.
void adam_step(ParamSet& params, const GradientSet& grads, AdamState& state);

enum class Phase { pretrain_softmax, multi_loss };
std::string to_string(Phase phase);

struct TrainConfig {
  BackboneConfig model;
  FeatureConfig features;
  LossWeights weights;
  AdamConfig adam;
  std::size_t P = 8;
  std::size_t K = 2;
  std::size_t pretrain_epochs = 3;
  std::size_t epochs = 30;
  std::uint64_t seed = 1;
  // Write a checkpoint every N epochs; 0 keeps only the final model.
  std::size_t checkpoint_every = 1;

  void validate() const;
};

struct StepMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  Phase phase = Phase::pretrain_softmax;
  double total = 0.0;
  double triplet = 0.0;
  double npair = 0.0;
  double angular = 0.0;
  double softmax = 0.0;
};

struct EpochSummary {
  std::size_t epoch = 0;
  Phase phase = Phase::pretrain_softmax;
  double mean_total = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepMetrics> steps;
  std::vector<EpochSummary> epochs;
};

inline constexpr const char* kMetricsHeader = "step,epoch,phase,L_total,L_tri,L_npair,L_ang,L_soft";
std::string format_metrics_row(const StepMetrics& m);

// Weights used in each phase: softmax alone while pretraining, the configured
// four-term objective afterwards.
LossWeights phase_weights(const TrainConfig& cfg, Phase phase);

// One optimization step on a PK batch: builds per-item gradient graphs,
// evaluates the combined loss on the stacked embeddings and returns the
// summed parameter gradients in parameter order.
struct StepOutcome {
  LossBreakdown loss;
  GradientSet grads;
};
StepOutcome compute_step(const BackboneConfig& model, const ParamSet& params, const std::vector<FeatureCrop>& crops,
                         const std::vector<std::size_t>& labels, const LossWeights& weights);

struct TrainOptions {
  // Output directory for metrics.csv, checkpoints/ and model/; empty = in memory only.
  std::filesystem::path out_dir;
  std::function<void(const EpochSummary&)> on_epoch;
};

// Softmax pretraining followed by multi-loss fine-tuning. Deterministic for a
// given configuration and dataset.
TrainResult train(const Dataset& dataset, const TrainConfig& cfg, const TrainOptions& options = {});

}  // namespace metricforge
