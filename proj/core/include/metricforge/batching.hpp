#pragma once

#include <cstddef>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "metricforge/losses.hpp"
#include "metricforge/tensor.hpp"

namespace metricforge {

struct Utterance {
  std::string speaker;
  std::filesystem::path path;
};

// Utterances plus a dense label per utterance: the index of its speaker in
// the sorted list of distinct speaker ids.
struct Dataset {
  std::vector<Utterance> utterances;
  std::vector<std::string> speakers;
  std::vector<std::size_t> labels;
  std::vector<std::vector<std::size_t>> by_speaker;

  static Dataset from_utterances(std::vector<Utterance> utterances);
  std::size_t size() const { return utterances.size(); }
};

// Manifest: UTF-8 lines `speaker_id<TAB>wav_path`. Relative paths resolve
// against the manifest's directory.
Dataset read_manifest(const std::filesystem::path& manifest);
// Paths are written relative to the manifest directory when possible.
void write_manifest(const std::filesystem::path& manifest, const std::vector<Utterance>& utterances);

// P classes x K items each, grouped by class: rows [c*K, (c+1)*K) share a label.
struct PKBatch {
  std::vector<std::size_t> items;   // utterance indices into the dataset
  std::vector<std::size_t> labels;  // dataset label of each item
  std::size_t P = 0;
  std::size_t K = 0;

  void validate() const;
};

// Uniformly chooses P speakers without replacement among those with at least
// K utterances, then K of their utterances without replacement.
PKBatch sample_pk(const Dataset& dataset, std::size_t P, std::size_t K, std::mt19937_64& rng);

std::size_t batches_per_epoch(std::size_t num_utterances, std::size_t P, std::size_t K);

// For every ordered (anchor, positive) pair with a shared label, picks the
// negative with the smallest squared distance that still exceeds the
// anchor-positive distance; if none does, the closest negative overall.
// Ties go to the lowest row index. embeddings is [B x D].
std::vector<TripletIndices> mine_semi_hard(const Tensor& embeddings, const std::vector<std::size_t>& labels);

// The first two rows of each class, in order of first appearance.
NPairTuple build_npair(const std::vector<std::size_t>& labels);

// Angular triangles reuse the mined triplets.
std::vector<TripletIndices> build_angular_triplets(const Tensor& embeddings, const std::vector<std::size_t>& labels);

}  // namespace metricforge
