#include "metricforge/audio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <fstream>
#include <mutex>
#include <numbers>

#include <fftw3.h>
#include <nlohmann/json.hpp>

#include "metricforge/errors.hpp"

namespace metricforge {

namespace {

static_assert(std::endian::native == std::endian::little, "feature cache assumes a little-endian host");

// One r2c plan shared by all threads. Plans are built once under a lock;
// the new-array execute interface is thread-safe.
class RealFft {
 public:
  static const RealFft& instance() {
    static const RealFft fft;
    return fft;
  }

  void run(double* in, fftw_complex* out) const { fftw_execute_dft_r2c(plan_, in, out); }

 private:
  RealFft() {
    std::vector<double> in(kWindowSamples);
    std::vector<fftw_complex> out(kNumBins);
    // FFTW_ESTIMATE keeps the plan (and therefore the rounding) identical run to run.
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(kWindowSamples), in.data(), out.data(),
                                 FFTW_ESTIMATE | FFTW_UNALIGNED);
    if (plan_ == nullptr) throw NumericError("fftw: could not create plan");
  }
  ~RealFft() { fftw_destroy_plan(plan_); }

  fftw_plan plan_ = nullptr;
};

const std::vector<double>& hamming_window() {
  static const std::vector<double> window = [] {
    std::vector<double> w(kWindowSamples);
    for (std::size_t n = 0; n < kWindowSamples; ++n) {
      w[n] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                                    static_cast<double>(kWindowSamples));
    }
    return w;
  }();
  return window;
}

// Mirror index without repeating the edge sample.
std::size_t reflect_index(std::size_t j, std::size_t n) {
  if (n == 1) return 0;
  const std::size_t period = 2 * (n - 1);
  j %= period;
  return j < n ? j : period - j;
}

}  // namespace

std::string to_string(SpectrumKind kind) { return kind == SpectrumKind::magnitude ? "magnitude" : "power"; }

std::string to_string(Normalization norm) { return norm == Normalization::per_bin ? "per-bin" : "none"; }

SpectrumKind parse_spectrum_kind(const std::string& text) {
  if (text == "magnitude") return SpectrumKind::magnitude;
  if (text == "power") return SpectrumKind::power;
  throw ContractError("unknown spectrum kind '" + text + "' (magnitude | power)");
}

Normalization parse_normalization(const std::string& text) {
  if (text == "per-bin" || text == "per_bin") return Normalization::per_bin;
  if (text == "none") return Normalization::none;
  throw ContractError("unknown normalization '" + text + "' (per-bin | none)");
}

Spectrogram spectrogram(const Waveform& wave, const FeatureConfig& cfg) {
  if (wave.sample_rate != kSampleRate) {
    throw DataError("spectrogram: expected 16000 Hz audio, got " + std::to_string(wave.sample_rate));
  }
  const std::size_t n = wave.samples.size();
  if (n == 0) throw DataError("spectrogram: empty signal");
  if (n + kHopSamples < kWindowSamples) {
    throw DataError("spectrogram: signal of " + std::to_string(n) + " samples is shorter than one window");
  }

  std::vector<double> padded(n + kHopSamples);
  std::copy(wave.samples.begin(), wave.samples.end(), padded.begin());
  for (std::size_t i = 0; i < kHopSamples; ++i) {
    // Continue the signal past its end as a mirror image around the last sample.
    padded[n + i] = wave.samples[reflect_index(n - 1 + (i + 1), n)];
  }

  Spectrogram spec;
  spec.frames = (padded.size() - kWindowSamples) / kHopSamples + 1;
  spec.data.resize(spec.frames * kNumBins);

  const auto& window = hamming_window();
  const auto& fft = RealFft::instance();
  std::vector<double> frame(kWindowSamples);
  std::vector<fftw_complex> bins(kNumBins);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    const double* src = padded.data() + t * kHopSamples;
    for (std::size_t k = 0; k < kWindowSamples; ++k) frame[k] = src[k] * window[k];
    fft.run(frame.data(), bins.data());
    double* row = spec.data.data() + t * kNumBins;
    for (std::size_t k = 0; k < kNumBins; ++k) {
      const double power = bins[k][0] * bins[k][0] + bins[k][1] * bins[k][1];
      double v = cfg.spectrum == SpectrumKind::power ? power : std::sqrt(power);
      if (cfg.log_compress) v = std::log(v + 1e-6);
      row[k] = v;
    }
  }
  return spec;
}

Waveform crop_at(const Waveform& wave, std::size_t offset) {
  if (wave.samples.empty()) throw DataError("crop: empty signal");
  Waveform out;
  out.sample_rate = wave.sample_rate;
  out.samples.resize(kCropSamples);
  const std::size_t n = wave.samples.size();
  if (n <= kCropSamples) {
    for (std::size_t i = 0; i < kCropSamples; ++i) out.samples[i] = wave.samples[i % n];
    return out;
  }
  if (offset > n - kCropSamples) throw ContractError("crop: window runs past the end of the signal");
  std::copy_n(wave.samples.begin() + static_cast<std::ptrdiff_t>(offset), kCropSamples, out.samples.begin());
  return out;
}

std::size_t random_crop_offset(std::size_t num_samples, std::mt19937_64& rng) {
  if (num_samples <= kCropSamples) return 0;
  std::uniform_int_distribution<std::size_t> start(0, num_samples - kCropSamples);
  return start(rng);
}

Waveform crop_3s(const Waveform& wave, std::mt19937_64& rng) {
  return crop_at(wave, random_crop_offset(wave.samples.size(), rng));
}

std::vector<std::size_t> evenly_spaced_offsets(std::size_t num_samples, std::size_t count) {
  std::vector<std::size_t> offsets(count, 0);
  if (num_samples <= kCropSamples || count == 0) return offsets;
  const std::size_t slack = num_samples - kCropSamples;
  if (count == 1) {
    offsets[0] = slack / 2;
    return offsets;
  }
  for (std::size_t k = 0; k < count; ++k) {
    offsets[k] = static_cast<std::size_t>(
        std::llround(static_cast<double>(k) * static_cast<double>(slack) / static_cast<double>(count - 1)));
  }
  return offsets;
}

Tensor FeatureCrop::to_tensor() const {
  return Tensor(Shape{kCropChannels, kCropFrames, kNumBins}, data);
}

FeatureCrop to_feature_crop(const Spectrogram& spec, const FeatureConfig& cfg) {
  if (spec.frames != kCropFrames || spec.data.size() != kCropFrames * kNumBins) {
    throw ShapeError("to_feature_crop: expected 300 x 161 spectrogram, got " + std::to_string(spec.frames) +
                     " frames");
  }
  std::vector<double> plane = spec.data;
  if (cfg.norm == Normalization::per_bin) {
    const auto frames = static_cast<double>(kCropFrames);
    for (std::size_t k = 0; k < kNumBins; ++k) {
      double mean = 0.0;
      for (std::size_t t = 0; t < kCropFrames; ++t) mean += spec.at(t, k);
      mean /= frames;
      double var = 0.0;
      for (std::size_t t = 0; t < kCropFrames; ++t) {
        const double d = spec.at(t, k) - mean;
        var += d * d;
      }
      var /= frames;
      const double sd = std::sqrt(var);
      // Bins that are constant up to rounding carry no information.
      const bool flat = sd == 0.0 || sd <= 1e-10 * std::abs(mean);
      for (std::size_t t = 0; t < kCropFrames; ++t) {
        plane[t * kNumBins + k] = flat ? 0.0 : (spec.at(t, k) - mean) / sd;
      }
    }
  }
  FeatureCrop crop;
  crop.data.reserve(kCropChannels * plane.size());
  for (std::size_t c = 0; c < kCropChannels; ++c) crop.data.insert(crop.data.end(), plane.begin(), plane.end());
  return crop;
}

FeatureCrop extract_features(const Waveform& crop, const FeatureConfig& cfg) {
  return to_feature_crop(spectrogram(crop, cfg), cfg);
}

void save_feature_crop(const std::filesystem::path& stem, const FeatureCrop& crop, const FeatureCacheEntry& entry) {
  if (crop.data.size() != kCropChannels * FeatureCrop::plane_size()) {
    throw ShapeError("save_feature_crop: crop has wrong size");
  }
  auto blob = stem;
  blob += ".f64";
  std::ofstream out(blob, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + blob.string());
  out.write(reinterpret_cast<const char*>(crop.data.data()),
            static_cast<std::streamsize>(crop.data.size() * sizeof(double)));
  if (!out) throw DataError("write failed for " + blob.string());

  nlohmann::json meta = {
      {"format_version", 1},
      {"shape", {kCropChannels, kCropFrames, kNumBins}},
      {"dtype", "float64-le"},
      {"normalization", to_string(entry.config.norm)},
      {"spectrum", to_string(entry.config.spectrum)},
      {"log", entry.config.log_compress},
      {"source", entry.source},
      {"seed", entry.seed},
      {"offset", entry.offset},
  };
  auto json_path = stem;
  json_path += ".json";
  std::ofstream js(json_path, std::ios::trunc);
  if (!js) throw DataError("cannot write " + json_path.string());
  js << meta.dump(2) << '\n';
}

FeatureCrop load_feature_crop(const std::filesystem::path& stem, FeatureCacheEntry* entry) {
  auto json_path = stem;
  json_path += ".json";
  std::ifstream js(json_path);
  if (!js) throw DataError("cannot open " + json_path.string());
  nlohmann::json meta;
  try {
    js >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(json_path.string() + ": " + e.what());
  }
  const std::vector<std::size_t> expected{kCropChannels, kCropFrames, kNumBins};
  if (meta.value("shape", std::vector<std::size_t>{}) != expected) {
    throw DataError(json_path.string() + ": unexpected crop shape");
  }
  if (entry != nullptr) {
    entry->source = meta.value("source", "");
    entry->seed = meta.value("seed", std::uint64_t{0});
    entry->offset = meta.value("offset", std::size_t{0});
    entry->config.norm = parse_normalization(meta.value("normalization", "per-bin"));
    entry->config.spectrum = parse_spectrum_kind(meta.value("spectrum", "magnitude"));
    entry->config.log_compress = meta.value("log", false);
  }

  auto blob = stem;
  blob += ".f64";
  std::ifstream in(blob, std::ios::binary);
  if (!in) throw DataError("cannot open " + blob.string());
  FeatureCrop crop;
  crop.data.resize(kCropChannels * FeatureCrop::plane_size());
  in.read(reinterpret_cast<char*>(crop.data.data()), static_cast<std::streamsize>(crop.data.size() * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(crop.data.size() * sizeof(double))) {
    throw DataError(blob.string() + ": truncated feature blob");
  }
  return crop;
}

}  // namespace metricforge
