#include "metricforge/batching.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include "metricforge/errors.hpp"

namespace metricforge {

namespace fs = std::filesystem;

Dataset Dataset::from_utterances(std::vector<Utterance> utterances) {
  Dataset d;
  d.utterances = std::move(utterances);
  std::set<std::string> ids;
  for (const auto& u : d.utterances) ids.insert(u.speaker);
  d.speakers.assign(ids.begin(), ids.end());
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < d.speakers.size(); ++i) index[d.speakers[i]] = i;
  d.by_speaker.resize(d.speakers.size());
  d.labels.reserve(d.utterances.size());
  for (std::size_t i = 0; i < d.utterances.size(); ++i) {
    const std::size_t label = index[d.utterances[i].speaker];
    d.labels.push_back(label);
    d.by_speaker[label].push_back(i);
  }
  return d;
}

Dataset read_manifest(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open manifest " + manifest.string());
  const fs::path base = manifest.parent_path();
  std::vector<Utterance> utts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 == line.size()) {
      throw DataError(manifest.string() + ":" + std::to_string(line_no) + ": expected speaker_id<TAB>wav_path");
    }
    fs::path path(line.substr(tab + 1));
    if (path.is_relative()) path = base / path;
    utts.push_back({line.substr(0, tab), path});
  }
  return Dataset::from_utterances(std::move(utts));
}

void write_manifest(const fs::path& manifest, const std::vector<Utterance>& utterances) {
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + manifest.string());
  const fs::path base = manifest.parent_path();
  for (const auto& u : utterances) {
    fs::path p = u.path;
    if (!base.empty() && p.is_absolute() == base.is_absolute()) {
      const auto rel = p.lexically_relative(base);
      if (!rel.empty() && *rel.begin() != "..") p = rel;
    }
    out << u.speaker << '\t' << p.generic_string() << '\n';
  }
  if (!out) throw DataError("write failed for " + manifest.string());
}

void PKBatch::validate() const {
  if (P < 2 || K < 2) throw ContractError("PK batch needs P >= 2 and K >= 2");
  if (items.size() != P * K || labels.size() != P * K) throw ContractError("PK batch must hold P*K items");
  std::map<std::size_t, std::size_t> counts;
  for (auto l : labels) ++counts[l];
  if (counts.size() != P) throw ContractError("PK batch must hold exactly P distinct labels");
  for (const auto& [label, count] : counts)
    if (count != K) throw ContractError("PK batch label appears " + std::to_string(count) + " times, expected K");
}

namespace {

// First `take` entries of v become a uniform sample without replacement.
template <typename T>
void partial_shuffle(std::vector<T>& v, std::size_t take, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, v.size() - 1);
    std::swap(v[i], v[pick(rng)]);
  }
}

double squared_distance(const double* x, const double* y, std::size_t dim) {
  double s = 0.0;
  for (std::size_t k = 0; k < dim; ++k) {
    const double d = x[k] - y[k];
    s += d * d;
  }
  return s;
}

}  // namespace

PKBatch sample_pk(const Dataset& dataset, std::size_t P, std::size_t K, std::mt19937_64& rng) {
  if (P < 2 || K < 2) throw ContractError("sample_pk: P and K must both be at least 2");
  std::vector<std::size_t> eligible;
  for (std::size_t s = 0; s < dataset.by_speaker.size(); ++s)
    if (dataset.by_speaker[s].size() >= K) eligible.push_back(s);
  if (eligible.size() < P) {
    throw DataError("sample_pk: need " + std::to_string(P) + " speakers with at least " + std::to_string(K) +
                    " utterances, dataset has " + std::to_string(eligible.size()));
  }
  partial_shuffle(eligible, P, rng);

  PKBatch batch;
  batch.P = P;
  batch.K = K;
  for (std::size_t c = 0; c < P; ++c) {
    auto utts = dataset.by_speaker[eligible[c]];
    partial_shuffle(utts, K, rng);
    for (std::size_t k = 0; k < K; ++k) {
      batch.items.push_back(utts[k]);
      batch.labels.push_back(eligible[c]);
    }
  }
  return batch;
}

std::size_t batches_per_epoch(std::size_t num_utterances, std::size_t P, std::size_t K) {
  const std::size_t per_batch = P * K;
  if (per_batch == 0) throw ContractError("batches_per_epoch: empty batch");
  return (num_utterances + per_batch - 1) / per_batch;
}

std::vector<TripletIndices> mine_semi_hard(const Tensor& embeddings, const std::vector<std::size_t>& labels) {
  if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size()) {
    throw ShapeError("mine_semi_hard: embeddings must be [B x D] with one label per row");
  }
  if (std::set<std::size_t>(labels.begin(), labels.end()).size() < 2) {
    throw ContractError("mine_semi_hard: batch needs at least two classes");
  }
  const std::size_t b = embeddings.dim(0), dim = embeddings.dim(1);
  const double* e = embeddings.values().data();

  std::vector<double> dist(b * b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) dist[i * b + j] = squared_distance(e + i * dim, e + j * dim, dim);

  std::vector<TripletIndices> triplets;
  for (std::size_t a = 0; a < b; ++a) {
    for (std::size_t p = 0; p < b; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      const double d_ap = dist[a * b + p];
      std::size_t semi = b, hardest = b;
      double semi_d = std::numeric_limits<double>::infinity();
      double hard_d = std::numeric_limits<double>::infinity();
      for (std::size_t n = 0; n < b; ++n) {
        if (labels[n] == labels[a]) continue;
        const double d_an = dist[a * b + n];
        if (d_an > d_ap && d_an < semi_d) {
          semi_d = d_an;
          semi = n;
        }
        if (d_an < hard_d) {
          hard_d = d_an;
          hardest = n;
        }
      }
      triplets.push_back({a, p, semi < b ? semi : hardest});
    }
  }
  return triplets;
}

NPairTuple build_npair(const std::vector<std::size_t>& labels) {
  std::vector<std::size_t> order;
  std::map<std::size_t, std::vector<std::size_t>> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& r = rows[labels[i]];
    if (r.empty()) order.push_back(labels[i]);
    r.push_back(i);
  }
  if (order.size() < 2) throw ContractError("build_npair: need at least two classes");
  NPairTuple tuple;
  for (auto label : order) {
    const auto& r = rows[label];
    if (r.size() < 2) throw ContractError("build_npair: every class needs K >= 2 items");
    tuple.anchors.push_back(r[0]);
    tuple.positives.push_back(r[1]);
    tuple.classes.push_back(static_cast<int>(label));
  }
  return tuple;
}

std::vector<TripletIndices> build_angular_triplets(const Tensor& embeddings, const std::vector<std::size_t>& labels) {
  return mine_semi_hard(embeddings, labels);
}

}  // namespace metricforge
