#include <random>

#include <benchmark/benchmark.h>

#include "metricforge/audio.hpp"
#include "metricforge/batching.hpp"
#include "metricforge/eval.hpp"
#include "metricforge/losses.hpp"
#include "metricforge/model.hpp"

using namespace metricforge;

namespace {

std::vector<double> uniform(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const Tensor x(Shape{c, 38, 41}, uniform(c * 38 * 41, 1));
  const Tensor k(Shape{c, c, 3, 3}, uniform(c * c * 9, 2));
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k, 1, 1));
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_Conv2dBackward(benchmark::State& state) {
  const Tensor k(Shape{32, 32, 3, 3}, uniform(32 * 32 * 9, 2), true);
  const Tensor x(Shape{32, 38, 41}, uniform(32 * 38 * 41, 1), true);
  for (auto _ : state) {
    Tensor loss = sum(conv2d(x, k, 1, 1));
    loss.backward();
  }
}
BENCHMARK(BM_Conv2dBackward)->Unit(benchmark::kMillisecond);

void BM_Spectrogram(benchmark::State& state) {
  const Waveform w{uniform(kCropSamples, 3)};
  for (auto _ : state) benchmark::DoNotOptimize(spectrogram(w));
}
BENCHMARK(BM_Spectrogram)->Unit(benchmark::kMillisecond);

void BM_ExtractFeatures(benchmark::State& state) {
  const Waveform w{uniform(kCropSamples, 4)};
  for (auto _ : state) benchmark::DoNotOptimize(extract_features(w));
}
BENCHMARK(BM_ExtractFeatures)->Unit(benchmark::kMillisecond);

void BM_ForwardEmbed(benchmark::State& state) {
  BackboneConfig cfg;
  cfg.num_classes = 20;
  const ParamSet params = init_params(cfg, 1);
  FeatureCrop crop;
  crop.data = uniform(kCropChannels * FeatureCrop::plane_size(), 5);
  for (auto _ : state) benchmark::DoNotOptimize(forward_embed(crop, cfg, params));
}
BENCHMARK(BM_ForwardEmbed)->Unit(benchmark::kMillisecond);

void BM_ComputeEer(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g(0.0, 1.0);
  ScoreSet s;
  for (std::size_t i = 0; i < n; ++i) {
    s.labels.push_back(static_cast<int>(i % 2));
    s.scores.push_back(g(rng) + static_cast<double>(i % 2));
  }
  for (auto _ : state) benchmark::DoNotOptimize(compute_eer(s));
}
BENCHMARK(BM_ComputeEer)->Arg(400)->Arg(10000)->Unit(benchmark::kMicrosecond);

void BM_MineSemiHard(benchmark::State& state) {
  const std::size_t b = 16, d = 128;
  const Tensor e = l2_normalize_rows(Tensor(Shape{b, d}, uniform(b * d, 7)));
  std::vector<std::size_t> labels(b);
  for (std::size_t i = 0; i < b; ++i) labels[i] = i / 2;
  for (auto _ : state) benchmark::DoNotOptimize(mine_semi_hard(e, labels));
}
BENCHMARK(BM_MineSemiHard)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
