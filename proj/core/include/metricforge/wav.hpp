#pragma once

#include <filesystem>
#include <vector>

namespace metricforge {

inline constexpr int kSampleRate = 16000;

// Mono audio with samples in [-1, 1].
struct Waveform {
  std::vector<double> samples;
  int sample_rate = kSampleRate;
};

// Reads a RIFF/WAVE file holding mono 16-bit PCM at 16 kHz. Anything else
// (other encodings, channel counts, bit depths or rates) is a DataError.
Waveform read_wav(const std::filesystem::path& path);

// Writes mono 16-bit PCM; samples are clamped to [-1, 1] and rounded.
void write_wav(const std::filesystem::path& path, const Waveform& wave);

}  // namespace metricforge
