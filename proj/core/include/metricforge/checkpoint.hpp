#pragma once

#include <filesystem>

#include "metricforge/audio.hpp"
#include "metricforge/model.hpp"

namespace metricforge {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  BackboneConfig model;
  FeatureConfig features;
  ParamSet params;
};

// Layout: <dir>/checkpoint.json (format version, model and feature config,
// parameter names and shapes) plus <dir>/params/<name>.f64 holding each
// parameter as flat little-endian float64 values.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& checkpoint);

// Validates every blob against the shapes the stored configuration implies.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace metricforge
