#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "metricforge/audio.hpp"
#include "metricforge/tensor.hpp"

namespace metricforge {

// Ordered, named parameter tensors. Order is insertion order and is part of
// the checkpoint format.
class ParamSet {
 public:
  void add(std::string name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  std::size_t total_values() const;

  // Independent leaf copies, e.g. one per concurrently built gradient graph.
  ParamSet replicate(bool requires_grad) const;
  // Subset whose names start with prefix.
  ParamSet select(const std::string& prefix) const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

bool operator==(const ParamSet& a, const ParamSet& b);

struct BackboneConfig {
  std::vector<std::size_t> channels{16, 32, 64, 128};
  std::vector<std::size_t> blocks{1, 1, 1, 1};
  // Zero-based stage indices whose output passes through an SE block.
  std::vector<std::size_t> se_stages{1, 2, 3};
  std::size_t se_reduction = 4;
  std::size_t embedding_dim = 128;
  // Softmax classifier width; 0 means no classifier head.
  std::size_t num_classes = 0;
  std::size_t input_channels = kCropChannels;
  std::size_t input_frames = kCropFrames;
  std::size_t input_bins = kNumBins;

  void validate() const;
  bool has_se(std::size_t stage) const;
};

bool operator==(const BackboneConfig& a, const BackboneConfig& b);

// 1x1 squeeze (C -> C/r) and excitation (C/r -> C) convolutions.
struct SEBlockParams {
  Tensor squeeze_weight;  // [C/r x C x 1 x 1]
  Tensor squeeze_bias;    // [C/r]
  Tensor excite_weight;   // [C x C/r x 1 x 1]
  Tensor excite_bias;     // [C]
};

// M = sigmoid(conv(relu(conv(F)))) over the full C x H x W map;
// returns F * M + F.
Tensor se_block(const Tensor& features, const SEBlockParams& params);

struct Embedding {
  std::vector<double> vector;
  bool normalized = false;
};

// Expected name -> shape table for a configuration, in parameter order.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const BackboneConfig& cfg);

// Kaiming fan-in normal weights, zero biases, PReLU slopes 0.25.
ParamSet init_params(const BackboneConfig& cfg, std::uint64_t seed);

// Throws ContractError when params do not match the configuration.
void validate_params(const BackboneConfig& cfg, const ParamSet& params);

struct EmbeddingOutput {
  Tensor raw;         // [1 x D] before normalization
  Tensor normalized;  // [1 x D], unit L2 norm
};

// Stem, residual stages with SE attention, PReLU on the last convolution,
// spatial average pooling and a linear projection. Builds a gradient graph
// when params require gradients.
EmbeddingOutput forward(const Tensor& crop, const BackboneConfig& cfg, const ParamSet& params);

// Logits [B x num_classes] from raw embeddings [B x D].
Tensor classify(const Tensor& raw_embeddings, const BackboneConfig& cfg, const ParamSet& params);

Embedding forward_embed(const FeatureCrop& crop, const BackboneConfig& cfg, const ParamSet& params);

}  // namespace metricforge
