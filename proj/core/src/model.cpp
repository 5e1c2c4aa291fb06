#include "metricforge/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "metricforge/errors.hpp"

namespace metricforge {

// -- ParamSet ---------------------------------------------------------------------

void ParamSet::add(std::string name, Tensor value) {
  if (index_.count(name)) throw ContractError("ParamSet: duplicate parameter " + name);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(value));
}

const Tensor& ParamSet::at(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("ParamSet: no parameter named " + name);
  return entries_[it->second].second;
}

Tensor& ParamSet::at(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("ParamSet: no parameter named " + name);
  return entries_[it->second].second;
}

std::size_t ParamSet::total_values() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

ParamSet ParamSet::replicate(bool requires_grad) const {
  ParamSet out;
  for (const auto& [name, t] : entries_) out.add(name, t.detach(requires_grad));
  return out;
}

ParamSet ParamSet::select(const std::string& prefix) const {
  ParamSet out;
  for (const auto& [name, t] : entries_)
    if (name.rfind(prefix, 0) == 0) out.add(name, t);
  return out;
}

bool operator==(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& [na, ta] = a.entries()[i];
    const auto& [nb, tb] = b.entries()[i];
    if (na != nb || ta.shape() != tb.shape()) return false;
    if (!std::equal(ta.values().begin(), ta.values().end(), tb.values().begin())) return false;
  }
  return true;
}

// -- configuration ----------------------------------------------------------------

void BackboneConfig::validate() const {
  if (channels.empty()) throw ContractError("backbone: at least one stage required");
  if (blocks.size() != channels.size()) throw ContractError("backbone: blocks per stage must match stage count");
  if (se_reduction == 0) throw ContractError("backbone: SE reduction must be positive");
  for (std::size_t s = 0; s < channels.size(); ++s) {
    if (channels[s] == 0) throw ContractError("backbone: stage channel count must be positive");
    if (blocks[s] == 0) throw ContractError("backbone: every stage needs at least one block");
    if (channels[s] % se_reduction != 0) {
      throw ContractError("backbone: stage " + std::to_string(s) + " channels " + std::to_string(channels[s]) +
                          " not divisible by SE reduction " + std::to_string(se_reduction));
    }
  }
  for (auto s : se_stages)
    if (s >= channels.size()) throw ContractError("backbone: SE stage index out of range");
  if (embedding_dim < 2) throw ContractError("backbone: embedding_dim must be at least 2");
  if (input_channels == 0 || input_frames == 0 || input_bins == 0) {
    throw ContractError("backbone: input geometry must be positive");
  }
}

bool BackboneConfig::has_se(std::size_t stage) const {
  return std::find(se_stages.begin(), se_stages.end(), stage) != se_stages.end();
}

bool operator==(const BackboneConfig& a, const BackboneConfig& b) {
  return a.channels == b.channels && a.blocks == b.blocks && a.se_stages == b.se_stages &&
         a.se_reduction == b.se_reduction && a.embedding_dim == b.embedding_dim && a.num_classes == b.num_classes &&
         a.input_channels == b.input_channels && a.input_frames == b.input_frames && a.input_bins == b.input_bins;
}

// -- geometry ---------------------------------------------------------------------

namespace {

// Stride-2 stages halve each spatial extent (rounding up). The kernel extent is
// chosen per axis so (extent + 2*pad - k) is even: 3 for odd extents, 4 for even.
// The projection shortcut uses 1 or 2 with no padding to land on the same size.
struct Downsample {
  std::size_t kh, kw, proj_kh, proj_kw;
};

Downsample downsample_for(std::size_t h, std::size_t w) {
  return {h % 2 ? 3u : 4u, w % 2 ? 3u : 4u, h % 2 ? 1u : 2u, w % 2 ? 1u : 2u};
}

std::size_t halve(std::size_t n) { return (n + 1) / 2; }

std::string block_prefix(std::size_t stage, std::size_t block) {
  return "stage" + std::to_string(stage) + ".block" + std::to_string(block) + ".";
}

std::string se_prefix(std::size_t stage) { return "stage" + std::to_string(stage) + ".se."; }

bool is_final_block(const BackboneConfig& cfg, std::size_t stage, std::size_t block) {
  return stage + 1 == cfg.channels.size() && block + 1 == cfg.blocks[stage];
}

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_shapes(const BackboneConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<std::string, Shape>> shapes;
  std::size_t h = cfg.input_frames, w = cfg.input_bins;

  const auto stem = downsample_for(h, w);
  shapes.push_back({"stem.weight", {cfg.channels[0], cfg.input_channels, stem.kh, stem.kw}});
  shapes.push_back({"stem.bias", {cfg.channels[0]}});
  h = halve(h);
  w = halve(w);

  std::size_t in_ch = cfg.channels[0];
  for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
    const std::size_t out_ch = cfg.channels[s];
    for (std::size_t b = 0; b < cfg.blocks[s]; ++b) {
      const auto p = block_prefix(s, b);
      const bool down = b == 0;
      const auto geo = downsample_for(h, w);
      const std::size_t kh = down ? geo.kh : 3, kw = down ? geo.kw : 3;
      shapes.push_back({p + "conv1.weight", {out_ch, in_ch, kh, kw}});
      shapes.push_back({p + "conv1.bias", {out_ch}});
      shapes.push_back({p + "conv2.weight", {out_ch, out_ch, 3, 3}});
      shapes.push_back({p + "conv2.bias", {out_ch}});
      if (down || in_ch != out_ch) {
        shapes.push_back({p + "proj.weight", {out_ch, in_ch, down ? geo.proj_kh : 1, down ? geo.proj_kw : 1}});
      }
      if (is_final_block(cfg, s, b)) shapes.push_back({p + "prelu", {out_ch}});
      if (down) {
        h = halve(h);
        w = halve(w);
      }
      in_ch = out_ch;
    }
    if (cfg.has_se(s)) {
      const std::size_t mid = out_ch / cfg.se_reduction;
      const auto p = se_prefix(s);
      shapes.push_back({p + "squeeze.weight", {mid, out_ch, 1, 1}});
      shapes.push_back({p + "squeeze.bias", {mid}});
      shapes.push_back({p + "excite.weight", {out_ch, mid, 1, 1}});
      shapes.push_back({p + "excite.bias", {out_ch}});
    }
  }
  shapes.push_back({"head.weight", {in_ch, cfg.embedding_dim}});
  shapes.push_back({"head.bias", {cfg.embedding_dim}});
  if (cfg.num_classes > 0) {
    shapes.push_back({"classifier.weight", {cfg.embedding_dim, cfg.num_classes}});
    shapes.push_back({"classifier.bias", {cfg.num_classes}});
  }
  return shapes;
}

ParamSet init_params(const BackboneConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamSet params;
  for (auto& [name, shape] : parameter_shapes(cfg)) {
    Tensor t(shape);
    auto v = t.mutable_values();
    const auto ends_with = [&](const std::string& suffix) {
      return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with("prelu")) {
      std::fill(v.begin(), v.end(), 0.25);
    } else if (ends_with("weight")) {
      // Convolutions feed rectifiers (gain 2); linear layers do not (gain 1).
      const bool conv = shape.size() == 4;
      const std::size_t fan_in = conv ? shape[1] * shape[2] * shape[3] : shape[0];
      std::normal_distribution<double> dist(0.0, std::sqrt((conv ? 2.0 : 1.0) / static_cast<double>(fan_in)));
      for (double& x : v) x = dist(rng);
    }
    params.add(name, std::move(t));
  }
  return params;
}

void validate_params(const BackboneConfig& cfg, const ParamSet& params) {
  const auto expected = parameter_shapes(cfg);
  if (expected.size() != params.size()) {
    throw ContractError("parameter count " + std::to_string(params.size()) + " does not match configuration (" +
                        std::to_string(expected.size()) + ")");
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& [name, t] = params.entries()[i];
    if (name != expected[i].first) throw ContractError("unexpected parameter " + name + ", wanted " + expected[i].first);
    if (t.shape() != expected[i].second) {
      throw ContractError("parameter " + name + " has shape " + shape_to_string(t.shape()) + ", configuration needs " +
                          shape_to_string(expected[i].second));
    }
  }
}

// -- forward ----------------------------------------------------------------------

Tensor se_block(const Tensor& features, const SEBlockParams& p) {
  if (features.rank() != 3) throw ShapeError("se_block: expected C x H x W input");
  const std::size_t c = features.dim(0);
  if (p.squeeze_weight.rank() != 4 || p.squeeze_weight.dim(1) != c || p.squeeze_weight.dim(2) != 1 ||
      p.squeeze_weight.dim(3) != 1) {
    throw ShapeError("se_block: squeeze kernel " + shape_to_string(p.squeeze_weight.shape()) + " does not fit " +
                     std::to_string(c) + " channels");
  }
  if (p.excite_weight.rank() != 4 || p.excite_weight.dim(0) != c || p.excite_weight.dim(1) != p.squeeze_weight.dim(0) ||
      p.excite_weight.dim(2) != 1 || p.excite_weight.dim(3) != 1) {
    throw ShapeError("se_block: excitation kernel " + shape_to_string(p.excite_weight.shape()) + " does not fit");
  }
  const Tensor squeezed = relu(add_channel_bias(conv2d(features, p.squeeze_weight, 1, 0), p.squeeze_bias));
  const Tensor attention = sigmoid(add_channel_bias(conv2d(squeezed, p.excite_weight, 1, 0), p.excite_bias));
  return features * attention + features;
}

namespace {

Tensor conv_bias(const Tensor& x, const ParamSet& params, const std::string& name, std::size_t stride,
                 std::size_t pad) {
  return add_channel_bias(conv2d(x, params.at(name + ".weight"), stride, pad), params.at(name + ".bias"));
}

}  // namespace

EmbeddingOutput forward(const Tensor& crop, const BackboneConfig& cfg, const ParamSet& params) {
  if (crop.shape() != Shape{cfg.input_channels, cfg.input_frames, cfg.input_bins}) {
    throw ShapeError("forward: input " + shape_to_string(crop.shape()) + " does not match configured geometry");
  }
  Tensor x = relu(conv_bias(crop, params, "stem", 2, 1));

  std::size_t in_ch = cfg.channels[0];
  for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
    const std::size_t out_ch = cfg.channels[s];
    for (std::size_t b = 0; b < cfg.blocks[s]; ++b) {
      const auto p = block_prefix(s, b);
      const bool down = b == 0;
      const std::size_t stride = down ? 2 : 1;
      Tensor h = relu(conv_bias(x, params, p + "conv1", stride, 1));
      h = conv_bias(h, params, p + "conv2", 1, 1);
      const Tensor shortcut = (down || in_ch != out_ch) ? conv2d(x, params.at(p + "proj.weight"), stride, 0) : x;
      h = h + shortcut;
      x = is_final_block(cfg, s, b) ? prelu(h, params.at(p + "prelu")) : relu(h);
      in_ch = out_ch;
    }
    if (cfg.has_se(s)) {
      const auto p = se_prefix(s);
      x = se_block(x, {params.at(p + "squeeze.weight"), params.at(p + "squeeze.bias"), params.at(p + "excite.weight"),
                       params.at(p + "excite.bias")});
    }
  }

  const Tensor pooled = reshape(global_avg_pool(x), Shape{1, in_ch});
  const Tensor raw = matmul(pooled, params.at("head.weight")) +
                     reshape(params.at("head.bias"), Shape{1, cfg.embedding_dim});
  return {raw, l2_normalize_rows(raw)};
}

Tensor classify(const Tensor& raw_embeddings, const BackboneConfig& cfg, const ParamSet& params) {
  if (cfg.num_classes == 0) throw ContractError("classify: configuration has no classifier head");
  if (raw_embeddings.rank() != 2 || raw_embeddings.dim(1) != cfg.embedding_dim) {
    throw ShapeError("classify: expected B x " + std::to_string(cfg.embedding_dim) + " embeddings");
  }
  const Tensor& bias = params.at("classifier.bias");
  const std::vector<Tensor> rows(raw_embeddings.dim(0), bias);
  return matmul(raw_embeddings, params.at("classifier.weight")) + stack_rows(rows);
}

Embedding forward_embed(const FeatureCrop& crop, const BackboneConfig& cfg, const ParamSet& params) {
  const auto out = forward(crop.to_tensor(), cfg, params);
  return {std::vector<double>(out.normalized.values().begin(), out.normalized.values().end()), true};
}

}  // namespace metricforge
