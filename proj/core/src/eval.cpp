#include "metricforge/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "metricforge/audio.hpp"
#include "metricforge/errors.hpp"
#include "metricforge/parallel.hpp"

namespace metricforge {

namespace fs = std::filesystem;

// -- trial lists ------------------------------------------------------------------

std::vector<TrialPair> read_trials(const fs::path& trial_file) {
  std::ifstream in(trial_file);
  if (!in) throw DataError("cannot open trial file " + trial_file.string());
  std::vector<TrialPair> trials;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream fields(line);
    TrialPair t;
    std::string label, extra;
    if (!(fields >> label >> t.path_a >> t.path_b) || (fields >> extra) || (label != "0" && label != "1")) {
      throw DataError(trial_file.string() + ":" + std::to_string(lineno) + ": expected `<0|1> <path_a> <path_b>`");
    }
    t.label = label == "1" ? 1 : 0;
    trials.push_back(std::move(t));
  }
  if (trials.empty()) throw DataError("trial file " + trial_file.string() + " has no trials");
  return trials;
}

void write_trials(const fs::path& trial_file, const std::vector<TrialPair>& trials) {
  if (trial_file.has_parent_path()) fs::create_directories(trial_file.parent_path());
  std::ofstream out(trial_file, std::ios::trunc);
  if (!out) throw DataError("cannot write " + trial_file.string());
  for (const auto& t : trials) out << t.label << ' ' << t.path_a << ' ' << t.path_b << '\n';
}

fs::path resolve_trial_path(const fs::path& trial_file, const std::string& path) {
  fs::path p(path);
  if (p.is_absolute()) return p;
  return trial_file.parent_path() / p;
}

// -- EER / DET --------------------------------------------------------------------

void ScoreSet::validate() const {
  if (scores.size() != labels.size()) throw ContractError("scores and labels differ in length");
  std::size_t targets = 0, nontargets = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ContractError("trial labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw NumericError("score " + std::to_string(i) + " is not finite");
    (labels[i] == 1 ? targets : nontargets) += 1;
  }
  if (targets == 0) throw ContractError("EER needs at least one target trial");
  if (nontargets == 0) throw ContractError("EER needs at least one nontarget trial");
}

std::vector<DetPoint> det_points(const ScoreSet& s) {
  s.validate();
  std::vector<std::size_t> order(s.scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });

  const auto n_tar = static_cast<double>(std::count(s.labels.begin(), s.labels.end(), 1));
  const auto n_non = static_cast<double>(s.labels.size()) - n_tar;

  // Sweep thresholds upwards; `below_*` counts scores strictly under t.
  std::vector<DetPoint> points;
  std::size_t below_tar = 0, below_non = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = s.scores[order[i]];
    points.push_back({t, (n_non - static_cast<double>(below_non)) / n_non, static_cast<double>(below_tar) / n_tar});
    for (; i < order.size() && s.scores[order[i]] == t; ++i) (s.labels[order[i]] == 1 ? below_tar : below_non) += 1;
  }
  points.push_back({std::numeric_limits<double>::infinity(), 0.0, 1.0});
  return points;
}

EERResult compute_eer(const ScoreSet& s) {
  const auto points = det_points(s);
  // points[0] has FAR = 1, FRR = 0 and the last FAR = 0, FRR = 1, so a crossing exists.
  std::size_t i = 1;
  while (points[i].frr < points[i].far) ++i;
  const DetPoint& lo = points[i - 1];
  const DetPoint& hi = points[i];
  const double d_lo = lo.far - lo.frr;  // > 0
  const double d_hi = hi.far - hi.frr;  // <= 0
  if (d_hi == 0.0) return {hi.far, std::isfinite(hi.threshold) ? hi.threshold : lo.threshold};
  const double w = d_lo / (d_lo - d_hi);
  EERResult r;
  r.eer = lo.far + w * (hi.far - lo.far);
  r.threshold = std::isfinite(hi.threshold) ? lo.threshold + w * (hi.threshold - lo.threshold) : lo.threshold;
  return r;
}

// -- distances --------------------------------------------------------------------

std::string to_string(DistanceMetric metric) {
  return metric == DistanceMetric::cosine ? "cosine" : "squared_euclidean";
}

DistanceMetric parse_distance_metric(const std::string& text) {
  if (text == "cosine") return DistanceMetric::cosine;
  if (text == "squared_euclidean" || text == "sqeuclidean" || text == "euclidean2") return DistanceMetric::squared_euclidean;
  throw ContractError("unknown distance metric '" + text + "' (expected cosine or squared_euclidean)");
}

CropEmbeddings embed_utterance(const Waveform& wave, const Checkpoint& model, std::size_t crops) {
  if (crops == 0) throw ContractError("embed_utterance: at least one crop required");
  CropEmbeddings out;
  out.reserve(crops);
  for (auto offset : evenly_spaced_offsets(wave.samples.size(), crops)) {
    const auto features = extract_features(crop_at(wave, offset), model.features);
    out.push_back(forward_embed(features, model.model, model.params).vector);
  }
  return out;
}

double embedding_distance(const std::vector<double>& a, const std::vector<double>& b, DistanceMetric metric) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("embedding_distance: embeddings differ in dimension");
  if (metric == DistanceMetric::squared_euclidean) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    return d;
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("embedding_distance: zero-norm embedding");
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

double mean_crop_distance(const CropEmbeddings& a, const CropEmbeddings& b, DistanceMetric metric) {
  if (a.empty() || b.empty()) throw ContractError("mean_crop_distance: empty crop set");
  std::vector<double> d;
  d.reserve(a.size() * b.size());
  for (const auto& x : a)
    for (const auto& y : b) d.push_back(embedding_distance(x, y, metric));
  std::sort(d.begin(), d.end());
  double total = 0.0;
  for (double v : d) total += v;
  return total / static_cast<double>(d.size());
}

double pair_distance(const fs::path& utt_a, const fs::path& utt_b, const Checkpoint& model, DistanceMetric metric) {
  return mean_crop_distance(embed_utterance(read_wav(utt_a), model), embed_utterance(read_wav(utt_b), model), metric);
}

// -- evaluation -------------------------------------------------------------------

EvalResult evaluate(const fs::path& trial_file, const Checkpoint& model, DistanceMetric metric) {
  EvalResult result;
  result.trials = read_trials(trial_file);

  std::map<std::string, std::size_t> index;
  std::vector<fs::path> paths;
  std::vector<std::string> missing;
  for (const auto& t : result.trials) {
    for (const auto* p : {&t.path_a, &t.path_b}) {
      if (index.count(*p)) continue;
      const fs::path resolved = resolve_trial_path(trial_file, *p);
      if (!fs::is_regular_file(resolved)) missing.push_back(*p);
      index.emplace(*p, paths.size());
      paths.push_back(resolved);
    }
  }
  if (!missing.empty()) {
    std::string msg = std::to_string(missing.size()) + " trial path(s) not found:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw DataError(msg);
  }

  std::vector<CropEmbeddings> embeddings(paths.size());
  parallel_for(paths.size(), [&](std::size_t i) { embeddings[i] = embed_utterance(read_wav(paths[i]), model); });

  for (const auto& t : result.trials) {
    const double d = mean_crop_distance(embeddings[index.at(t.path_a)], embeddings[index.at(t.path_b)], metric);
    result.scores.scores.push_back(-d);
    result.scores.labels.push_back(t.label);
  }
  result.eer = compute_eer(result.scores);
  result.det = det_points(result.scores);
  return result;
}

// -- output files -----------------------------------------------------------------

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_scores_csv(const fs::path& path, const std::vector<TrialPair>& trials, const ScoreSet& scores) {
  if (trials.size() != scores.scores.size()) throw ContractError("write_scores_csv: one score per trial required");
  auto out = open_out(path);
  out << "label,path_a,path_b,score\n";
  for (std::size_t i = 0; i < trials.size(); ++i) {
    out << trials[i].label << ',' << trials[i].path_a << ',' << trials[i].path_b << ',' << fmt(scores.scores[i]) << '\n';
  }
}

ScoreSet read_scores_csv(const fs::path& path, std::vector<TrialPair>* trials) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open score file " + path.string());
  ScoreSet s;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("label,", 0) == 0)) continue;
    std::vector<std::string> cols;
    std::istringstream fields(line);
    for (std::string c; std::getline(fields, c, ',');) cols.push_back(c);
    const auto bad = [&] { return DataError(path.string() + ":" + std::to_string(lineno) + ": expected label,path_a,path_b,score"); };
    if (cols.size() != 4 || (cols[0] != "0" && cols[0] != "1")) throw bad();
    double score = 0.0;
    try {
      std::size_t used = 0;
      score = std::stod(cols[3], &used);
      if (used != cols[3].size()) throw bad();
    } catch (const std::invalid_argument&) {
      throw bad();
    } catch (const std::out_of_range&) {
      throw bad();
    }
    s.labels.push_back(cols[0] == "1" ? 1 : 0);
    s.scores.push_back(score);
    if (trials) trials->push_back({s.labels.back(), cols[1], cols[2]});
  }
  if (s.scores.empty()) throw DataError("score file " + path.string() + " has no rows");
  return s;
}

void write_eer_json(const fs::path& path, const EERResult& eer, const ScoreSet& scores, const std::string& metric) {
  const auto targets = std::count(scores.labels.begin(), scores.labels.end(), 1);
  nlohmann::json j;
  j["eer"] = eer.eer;
  j["eer_percent"] = 100.0 * eer.eer;
  j["threshold"] = eer.threshold;
  j["num_trials"] = scores.scores.size();
  j["num_target"] = targets;
  j["num_nontarget"] = static_cast<std::ptrdiff_t>(scores.scores.size()) - targets;
  j["metric"] = metric;
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

void write_det_csv(const fs::path& path, const std::vector<DetPoint>& points) {
  auto out = open_out(path);
  out << "threshold,far,frr\n";
  for (const auto& p : points) out << (std::isfinite(p.threshold) ? fmt(p.threshold) : "inf") << ',' << fmt(p.far) << ',' << fmt(p.frr) << '\n';
}

}  // namespace metricforge
