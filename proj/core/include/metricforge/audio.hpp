#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "metricforge/tensor.hpp"
#include "metricforge/wav.hpp"

namespace metricforge {

inline constexpr std::size_t kWindowSamples = 320;  // 20 ms at 16 kHz
inline constexpr std::size_t kHopSamples = 160;     // 10 ms
inline constexpr std::size_t kNumBins = kWindowSamples / 2 + 1;
inline constexpr std::size_t kCropFrames = 300;
inline constexpr std::size_t kCropSamples = 3 * kSampleRate;
inline constexpr std::size_t kCropChannels = 3;

enum class SpectrumKind { magnitude, power };
enum class Normalization { per_bin, none };

struct FeatureConfig {
  SpectrumKind spectrum = SpectrumKind::magnitude;
  bool log_compress = false;  // log(x + 1e-6) before normalization
  Normalization norm = Normalization::per_bin;
};

std::string to_string(SpectrumKind kind);
std::string to_string(Normalization norm);
SpectrumKind parse_spectrum_kind(const std::string& text);
Normalization parse_normalization(const std::string& text);

// frames x 161 row-major.
struct Spectrogram {
  std::size_t frames = 0;
  std::vector<double> data;

  double at(std::size_t frame, std::size_t bin) const { return data[frame * kNumBins + bin]; }
};

// Short-time spectrum: periodic Hamming window of 320 samples, hop 160,
// 320-point DFT, 161 non-redundant bins. The signal is reflect-padded by 160
// samples at the end so a signal of n samples yields floor(n / 160) frames
// (300 for a 3 s crop).
Spectrogram spectrogram(const Waveform& wave, const FeatureConfig& cfg = {});

// Exactly 48000 samples starting at offset; shorter signals are tiled first.
Waveform crop_at(const Waveform& wave, std::size_t offset);

// Random 3 s window (uniform start) for long signals, tiling for short ones.
// The generator is only advanced when the signal is longer than 3 s.
Waveform crop_3s(const Waveform& wave, std::mt19937_64& rng);
// The start sample crop_3s would use; draws from rng only for long signals.
std::size_t random_crop_offset(std::size_t num_samples, std::mt19937_64& rng);

// Offsets of `count` evenly spaced 3 s windows covering the signal.
std::vector<std::size_t> evenly_spaced_offsets(std::size_t num_samples, std::size_t count);

// Normalized 3 x 300 x 161 network input. All three channel planes are equal.
struct FeatureCrop {
  std::vector<double> data;

  static constexpr std::size_t plane_size() { return kCropFrames * kNumBins; }
  Tensor to_tensor() const;
};

// Per-bin mean/variance normalization over the 300 frames (zero-variance bins
// become 0), then three copies of the plane.
FeatureCrop to_feature_crop(const Spectrogram& spec, const FeatureConfig& cfg = {});

FeatureCrop extract_features(const Waveform& crop, const FeatureConfig& cfg = {});

struct FeatureCacheEntry {
  std::string source;
  std::uint64_t seed = 0;
  std::size_t offset = 0;
  FeatureConfig config;
};

// Writes <stem>.f64 (little-endian float64, 3*300*161 values) and <stem>.json.
void save_feature_crop(const std::filesystem::path& stem, const FeatureCrop& crop, const FeatureCacheEntry& entry);
FeatureCrop load_feature_crop(const std::filesystem::path& stem, FeatureCacheEntry* entry = nullptr);

}  // namespace metricforge
