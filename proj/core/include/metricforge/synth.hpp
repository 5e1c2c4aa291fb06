#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "metricforge/batching.hpp"
#include "metricforge/eval.hpp"
#include "metricforge/wav.hpp"

namespace metricforge {

// A toy speaker: a harmonic voice at `pitch_hz` filtered by three formant
// resonances, with a speaker-specific spectral ripple drawn from timbre_seed.
struct SpeakerProfile {
  std::string speaker_id;
  double pitch_hz = 120.0;                     // in [80, 300]
  std::array<double, 3> formants_hz{};         // ascending, distinct, in [300, 3500]
  std::array<double, 3> bandwidths_hz{};
  std::uint64_t timbre_seed = 0;

  void validate() const;
};

SpeakerProfile make_speaker(std::uint64_t seed, std::size_t speaker_index);

// Syllables of harmonic voicing shaped by the formants, each at a random
// pitch within +-5% of the speaker's, plus white noise at 20 dB SNR.
Waveform synthesize_utterance(const SpeakerProfile& speaker, double duration_s, std::uint64_t seed,
                              std::size_t utterance_index);

struct SynthConfig {
  std::size_t num_speakers = 20;      // training speakers
  std::size_t heldout_speakers = 8;   // disjoint test speakers
  std::size_t utts_per_speaker = 20;
  double duration_s = 4.0;
  std::uint64_t seed = 1;
  std::size_t num_target = 200;
  std::size_t num_nontarget = 200;
};

struct CorpusPaths {
  std::filesystem::path train_manifest;
  std::filesystem::path test_manifest;
  std::filesystem::path trials;
};

// Writes <out>/wav/<speaker>/<utt>.wav, train.tsv, test.tsv and trials.txt.
// Byte-identical output for identical configurations.
CorpusPaths gen_corpus(const std::filesystem::path& out_dir, const SynthConfig& cfg);

// Balanced trial list drawn without replacement from all same-speaker and
// cross-speaker utterance pairs; no utterance is paired with itself. Paths are
// written relative to `relative_to` when it is non-empty.
std::vector<TrialPair> gen_trials(const Dataset& dataset, std::size_t num_target, std::size_t num_nontarget,
                                  std::uint64_t seed, const std::filesystem::path& relative_to = {});

}  // namespace metricforge
