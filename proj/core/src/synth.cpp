#include "metricforge/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "metricforge/errors.hpp"
#include "metricforge/parallel.hpp"

namespace metricforge {

namespace fs = std::filesystem;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t tag) {
  std::seed_seq seq{seed & 0xffffffffu, seed >> 32, a, b, tag};
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

std::string speaker_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "spk%03zu", index);
  return buf;
}

}  // namespace

void SpeakerProfile::validate() const {
  if (!(pitch_hz >= 80.0 && pitch_hz <= 300.0)) throw ContractError("speaker pitch outside [80, 300] Hz");
  for (std::size_t i = 0; i < 3; ++i) {
    if (!(formants_hz[i] >= 300.0 && formants_hz[i] <= 3500.0)) throw ContractError("formant outside [300, 3500] Hz");
    if (i > 0 && !(formants_hz[i] > formants_hz[i - 1])) throw ContractError("formants must be distinct and ascending");
    if (!(bandwidths_hz[i] > 0)) throw ContractError("formant bandwidth must be positive");
  }
}

SpeakerProfile make_speaker(std::uint64_t seed, std::size_t speaker_index) {
  auto rng = derive_rng(seed, speaker_index, 0, 1);
  SpeakerProfile s;
  s.speaker_id = speaker_name(speaker_index);
  // Log-uniform pitch covers low and high voices evenly.
  s.pitch_hz = std::exp(uniform(rng, std::log(80.0), std::log(300.0)));
  s.formants_hz = {uniform(rng, 300.0, 900.0), uniform(rng, 950.0, 2250.0), uniform(rng, 2300.0, 3500.0)};
  s.bandwidths_hz = {uniform(rng, 60.0, 160.0), uniform(rng, 80.0, 200.0), uniform(rng, 100.0, 250.0)};
  s.timbre_seed = rng();
  return s;
}

Waveform synthesize_utterance(const SpeakerProfile& speaker, double duration_s, std::uint64_t seed,
                              std::size_t utterance_index) {
  speaker.validate();
  if (!(duration_s > 0)) throw ContractError("utterance duration must be positive");
  const std::size_t n = static_cast<std::size_t>(std::llround(duration_s * kSampleRate));
  auto rng = derive_rng(seed ^ speaker.timbre_seed, utterance_index, 1, 2);

  // Speaker timbre: a fixed ripple across frequency on top of the formants.
  auto timbre = derive_rng(speaker.timbre_seed, 0, 0, 3);
  const double ripple_period = uniform(timbre, 250.0, 700.0);
  const double ripple_phase = uniform(timbre, 0.0, kTwoPi);
  const double tilt = uniform(timbre, 0.6, 1.2);  // spectral slope exponent

  // Each syllable is voiced at its own pitch within +-5% of the speaker's,
  // with fresh harmonic phases, gated by a raised-cosine envelope.
  // Speaking rate and pause length vary from utterance to utterance.
  const double nyquist = 0.5 * kSampleRate;
  const std::size_t ramp = kSampleRate / 50;
  const double syllable_scale = std::exp(uniform(rng, -0.7, 0.7));
  const double pause_scale = std::exp(uniform(rng, -1.05, 1.05));
  std::vector<double> voice(n, 0.0);
  for (std::size_t pos = static_cast<std::size_t>(uniform(rng, 0.0, 0.1) * kSampleRate); pos < n;) {
    const auto len = std::max(2 * ramp, static_cast<std::size_t>(syllable_scale * uniform(rng, 0.12, 0.32) * kSampleRate));
    const std::size_t end = std::min(n, pos + len);
    const double level = uniform(rng, 0.6, 1.0);
    const double f0 = speaker.pitch_hz * (1.0 + uniform(rng, -0.05, 0.05));
    for (std::size_t k = 1; k * f0 < nyquist - 200.0; ++k) {
      const double f = static_cast<double>(k) * f0;
      double amp = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        const double x = (f - speaker.formants_hz[i]) / (0.5 * speaker.bandwidths_hz[i]);
        amp += 1.0 / (1.0 + x * x);
      }
      amp *= level * (1.0 + 0.35 * std::sin(kTwoPi * f / ripple_period + ripple_phase));
      amp /= std::pow(static_cast<double>(k), 0.5 * tilt);
      // Rotating phasor keeps the inner loop to a few multiplies.
      const double phase = uniform(rng, 0.0, kTwoPi), w = kTwoPi * f / kSampleRate;
      double c = std::cos(phase), sn = std::sin(phase);
      const double cw = std::cos(w), sw = std::sin(w);
      for (std::size_t i = pos; i < end; ++i) {
        voice[i] += amp * sn;
        const double nc = c * cw - sn * sw;
        sn = sn * cw + c * sw;
        c = nc;
      }
    }
    for (std::size_t i = 0; i < end - pos; ++i) {
      double g = 1.0;
      if (i < ramp) g = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(i) / ramp);
      if (len - i <= ramp) g = std::min(g, 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(len - i) / ramp));
      voice[pos + i] *= g;
    }
    pos += len + static_cast<std::size_t>(pause_scale * uniform(rng, 0.04, 0.16) * kSampleRate);
  }
  double signal_power = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    signal_power += voice[i] * voice[i];
  }
  signal_power /= static_cast<double>(n);

  const double noise_sd = std::sqrt(signal_power / 100.0);  // 20 dB SNR
  std::normal_distribution<double> noise(0.0, noise_sd);
  Waveform w;
  w.sample_rate = kSampleRate;
  w.samples.resize(n);
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w.samples[i] = voice[i] + noise(rng);
    peak = std::max(peak, std::abs(w.samples[i]));
  }
  if (peak > 0) {
    for (auto& v : w.samples) v *= 0.9 / peak;
  }
  return w;
}

std::vector<TrialPair> gen_trials(const Dataset& dataset, std::size_t num_target, std::size_t num_nontarget,
                                  std::uint64_t seed, const fs::path& relative_to) {
  std::vector<std::pair<std::size_t, std::size_t>> same, diff;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    for (std::size_t j = i + 1; j < dataset.size(); ++j) {
      if (dataset.utterances[i].path == dataset.utterances[j].path) continue;
      (dataset.labels[i] == dataset.labels[j] ? same : diff).emplace_back(i, j);
    }
  }
  if (same.size() < num_target || diff.size() < num_nontarget) {
    throw DataError("gen_trials: requested " + std::to_string(num_target) + " target / " +
                    std::to_string(num_nontarget) + " nontarget trials but only " + std::to_string(same.size()) +
                    " / " + std::to_string(diff.size()) + " distinct pairs exist");
  }
  auto rng = derive_rng(seed, 0, 0, 4);
  const auto draw = [&](std::vector<std::pair<std::size_t, std::size_t>>& pool, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(count);
  };
  draw(same, num_target);
  draw(diff, num_nontarget);

  const auto name = [&](std::size_t idx) {
    const fs::path& p = dataset.utterances[idx].path;
    return (relative_to.empty() ? p : p.lexically_relative(relative_to)).generic_string();
  };
  std::vector<TrialPair> trials;
  for (auto [i, j] : same) trials.push_back({1, name(i), name(j)});
  for (auto [i, j] : diff) trials.push_back({0, name(i), name(j)});
  std::shuffle(trials.begin(), trials.end(), rng);
  return trials;
}

CorpusPaths gen_corpus(const fs::path& out_dir, const SynthConfig& cfg) {
  if (cfg.num_speakers < 2) throw ContractError("gen_corpus: at least two training speakers required");
  if (cfg.utts_per_speaker < 2) throw ContractError("gen_corpus: at least two utterances per speaker required");
  if (!(cfg.duration_s > 0)) throw ContractError("gen_corpus: duration must be positive");

  const std::size_t total_speakers = cfg.num_speakers + cfg.heldout_speakers;
  std::vector<SpeakerProfile> speakers;
  for (std::size_t s = 0; s < total_speakers; ++s) speakers.push_back(make_speaker(cfg.seed, s));

  std::vector<Utterance> utts;
  for (std::size_t s = 0; s < total_speakers; ++s) {
    for (std::size_t u = 0; u < cfg.utts_per_speaker; ++u) {
      char file[32];
      std::snprintf(file, sizeof file, "utt%03zu.wav", u);
      utts.push_back({speakers[s].speaker_id, out_dir / "wav" / speakers[s].speaker_id / file});
    }
  }
  for (std::size_t s = 0; s < total_speakers; ++s) fs::create_directories(out_dir / "wav" / speakers[s].speaker_id);
  parallel_for(utts.size(), [&](std::size_t i) {
    const std::size_t s = i / cfg.utts_per_speaker, u = i % cfg.utts_per_speaker;
    write_wav(utts[i].path, synthesize_utterance(speakers[s], cfg.duration_s, cfg.seed, u));
  });

  const auto split = utts.begin() + static_cast<std::ptrdiff_t>(cfg.num_speakers * cfg.utts_per_speaker);
  CorpusPaths paths{out_dir / "train.tsv", out_dir / "test.tsv", out_dir / "trials.txt"};
  write_manifest(paths.train_manifest, {utts.begin(), split});
  if (cfg.heldout_speakers > 0) {
    const std::vector<Utterance> test(split, utts.end());
    write_manifest(paths.test_manifest, test);
    if (cfg.num_target + cfg.num_nontarget > 0) {
      write_trials(paths.trials, gen_trials(Dataset::from_utterances(test), cfg.num_target, cfg.num_nontarget, cfg.seed,
                                            out_dir));
    } else {
      paths.trials.clear();
    }
  } else {
    paths.test_manifest.clear();
    paths.trials.clear();
  }
  return paths;
}

}  // namespace metricforge
