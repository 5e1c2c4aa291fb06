#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "metricforge/checkpoint.hpp"
#include "metricforge/wav.hpp"

namespace metricforge {

// One line of a trial list: `label path_a path_b`, label 1 = same speaker.
struct TrialPair {
  int label = 0;
  std::string path_a;  // as written in the trial file
  std::string path_b;
};

// Whitespace separated `label path_a path_b` lines.
std::vector<TrialPair> read_trials(const std::filesystem::path& trial_file);
void write_trials(const std::filesystem::path& trial_file, const std::vector<TrialPair>& trials);
// Relative trial paths resolve against the trial file's directory.
std::filesystem::path resolve_trial_path(const std::filesystem::path& trial_file, const std::string& path);

// Higher score = more likely the same speaker.
struct ScoreSet {
  std::vector<double> scores;
  std::vector<int> labels;

  // Equal lengths, labels in {0, 1}, at least one of each.
  void validate() const;
};

struct EERResult {
  double eer = 0.0;
  double threshold = 0.0;
};

// One operating point per distinct score used as threshold t, in ascending
// t, followed by t = +inf. FAR(t) = fraction of nontargets with score >= t,
// FRR(t) = fraction of targets with score < t.
struct DetPoint {
  double threshold = 0.0;
  double far = 0.0;
  double frr = 0.0;
};
std::vector<DetPoint> det_points(const ScoreSet& scores);

// Equal error rate at the FAR/FRR crossing, linearly interpolated between the
// two adjacent thresholds that bracket it.
EERResult compute_eer(const ScoreSet& scores);

enum class DistanceMetric { cosine, squared_euclidean };
std::string to_string(DistanceMetric metric);
DistanceMetric parse_distance_metric(const std::string& text);

inline constexpr std::size_t kTestCrops = 10;

// Unit embeddings of the evenly spaced 3 s test crops of one utterance.
using CropEmbeddings = std::vector<std::vector<double>>;

CropEmbeddings embed_utterance(const Waveform& wave, const Checkpoint& model, std::size_t crops = kTestCrops);

double embedding_distance(const std::vector<double>& a, const std::vector<double>& b, DistanceMetric metric);

// Mean over all |a| x |b| cross-crop distances. The distances are summed in
// sorted order, so the value is exactly symmetric in its arguments.
double mean_crop_distance(const CropEmbeddings& a, const CropEmbeddings& b, DistanceMetric metric);

// Mean distance between the test crops of two utterances (score = -distance).
double pair_distance(const std::filesystem::path& utt_a, const std::filesystem::path& utt_b, const Checkpoint& model,
                     DistanceMetric metric = DistanceMetric::cosine);

struct EvalResult {
  std::vector<TrialPair> trials;
  ScoreSet scores;
  EERResult eer;
  std::vector<DetPoint> det;
};

// Scores every trial; each distinct utterance is embedded once. Any path that
// cannot be found aborts the run with a DataError listing all of them.
EvalResult evaluate(const std::filesystem::path& trial_file, const Checkpoint& model,
                    DistanceMetric metric = DistanceMetric::cosine);

// CSV with header `label,path_a,path_b,score`.
void write_scores_csv(const std::filesystem::path& path, const std::vector<TrialPair>& trials, const ScoreSet& scores);
// Reads a score CSV back (header optional); used for scoring external systems.
ScoreSet read_scores_csv(const std::filesystem::path& path, std::vector<TrialPair>* trials = nullptr);

void write_eer_json(const std::filesystem::path& path, const EERResult& eer, const ScoreSet& scores,
                    const std::string& metric);
// CSV with header `threshold,far,frr`.
void write_det_csv(const std::filesystem::path& path, const std::vector<DetPoint>& points);
// Self-contained SVG DET plot on normal-deviate axes labelled in percent.
void write_det_svg(const std::filesystem::path& path, const std::vector<DetPoint>& points, const EERResult& eer);

}  // namespace metricforge
