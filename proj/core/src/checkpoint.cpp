#include "metricforge/checkpoint.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "metricforge/errors.hpp"

namespace metricforge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json model_to_json(const BackboneConfig& cfg) {
  return {{"channels", cfg.channels},
          {"blocks", cfg.blocks},
          {"se_stages", cfg.se_stages},
          {"se_reduction", cfg.se_reduction},
          {"embedding_dim", cfg.embedding_dim},
          {"num_classes", cfg.num_classes},
          {"input_shape", {cfg.input_channels, cfg.input_frames, cfg.input_bins}}};
}

BackboneConfig model_from_json(const json& j) {
  BackboneConfig cfg;
  cfg.channels = j.at("channels").get<std::vector<std::size_t>>();
  cfg.blocks = j.at("blocks").get<std::vector<std::size_t>>();
  cfg.se_stages = j.at("se_stages").get<std::vector<std::size_t>>();
  cfg.se_reduction = j.at("se_reduction").get<std::size_t>();
  cfg.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  cfg.num_classes = j.at("num_classes").get<std::size_t>();
  const auto input = j.at("input_shape").get<std::vector<std::size_t>>();
  if (input.size() != 3) throw DataError("checkpoint: input_shape must have three entries");
  cfg.input_channels = input[0];
  cfg.input_frames = input[1];
  cfg.input_bins = input[2];
  cfg.validate();
  return cfg;
}

fs::path blob_path(const fs::path& dir, const std::string& name) { return dir / "params" / (name + ".f64"); }

}  // namespace

void save_checkpoint(const fs::path& dir, const Checkpoint& checkpoint) {
  validate_params(checkpoint.model, checkpoint.params);
  fs::create_directories(dir / "params");

  json params = json::array();
  for (const auto& [name, t] : checkpoint.params.entries()) {
    const auto path = blob_path(dir, name);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!out) throw DataError("write failed for " + path.string());
    params.push_back({{"name", name}, {"shape", t.shape()}, {"file", "params/" + name + ".f64"}});
  }

  const json manifest = {{"format_version", kCheckpointFormatVersion},
                         {"dtype", "float64-le"},
                         {"model", model_to_json(checkpoint.model)},
                         {"features",
                          {{"spectrum", to_string(checkpoint.features.spectrum)},
                           {"log", checkpoint.features.log_compress},
                           {"normalization", to_string(checkpoint.features.norm)}}},
                         {"parameters", params}};
  std::ofstream js(dir / "checkpoint.json", std::ios::trunc);
  if (!js) throw DataError("cannot write " + (dir / "checkpoint.json").string());
  js << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const auto manifest_path = dir / "checkpoint.json";
  std::ifstream js(manifest_path);
  if (!js) throw DataError("cannot open checkpoint manifest " + manifest_path.string());
  json manifest;
  try {
    js >> manifest;
  } catch (const json::exception& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }

  Checkpoint ckpt;
  try {
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw DataError(manifest_path.string() + ": unsupported format version");
    }
    ckpt.model = model_from_json(manifest.at("model"));
    const auto& feats = manifest.at("features");
    ckpt.features.spectrum = parse_spectrum_kind(feats.at("spectrum").get<std::string>());
    ckpt.features.log_compress = feats.at("log").get<bool>();
    ckpt.features.norm = parse_normalization(feats.at("normalization").get<std::string>());

    for (const auto& entry : manifest.at("parameters")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto path = dir / entry.at("file").get<std::string>();
      std::ifstream in(path, std::ios::binary);
      if (!in) throw DataError("cannot open parameter blob " + path.string());
      std::vector<double> values(shape_numel(shape));
      in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
      if (in.gcount() != static_cast<std::streamsize>(values.size() * sizeof(double)) || in.peek() != EOF) {
        throw DataError(path.string() + ": blob size does not match shape " + shape_to_string(shape));
      }
      ckpt.params.add(name, Tensor(shape, std::move(values)));
    }
  } catch (const json::exception& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  try {
    validate_params(ckpt.model, ckpt.params);
  } catch (const ContractError& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  return ckpt;
}

}  // namespace metricforge
