#include "metricforge/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>

#include <CLI11.hpp>

#include "metricforge/audio.hpp"
#include "metricforge/batching.hpp"
#include "metricforge/checkpoint.hpp"
#include "metricforge/config.hpp"
#include "metricforge/errors.hpp"
#include "metricforge/eval.hpp"
#include "metricforge/synth.hpp"
#include "metricforge/trainer.hpp"

namespace metricforge::cli {

namespace fs = std::filesystem;

namespace {

// -- synth ------------------------------------------------------------------------

struct SynthArgs {
  SynthConfig cfg;
  fs::path out = "corpus";
};

int cmd_synth(const SynthArgs& a) {
  const auto paths = gen_corpus(a.out, a.cfg);
  std::printf("wrote %zu training utterances (%zu speakers) to %s\n", a.cfg.num_speakers * a.cfg.utts_per_speaker,
              a.cfg.num_speakers, paths.train_manifest.string().c_str());
  if (!paths.test_manifest.empty()) {
    std::printf("wrote %zu held-out utterances (%zu speakers) to %s\n", a.cfg.heldout_speakers * a.cfg.utts_per_speaker,
                a.cfg.heldout_speakers, paths.test_manifest.string().c_str());
  }
  if (!paths.trials.empty()) {
    std::printf("wrote %zu trials to %s\n", a.cfg.num_target + a.cfg.num_nontarget, paths.trials.string().c_str());
  }
  return kOk;
}

// -- features ---------------------------------------------------------------------

struct FeatureArgs {
  fs::path manifest;
  fs::path out = "features";
  std::uint64_t seed = 1;
  std::size_t crops = 1;
  std::string spectrum = "magnitude";
  bool log = false;
  std::string norm = "per-bin";
};

int cmd_features(const FeatureArgs& a) {
  FeatureConfig fc;
  fc.spectrum = parse_spectrum_kind(a.spectrum);
  fc.log_compress = a.log;
  fc.norm = parse_normalization(a.norm);
  const Dataset data = read_manifest(a.manifest);
  fs::create_directories(a.out);
  std::size_t written = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& u = data.utterances[i];
    const Waveform wave = read_wav(u.path);
    std::seed_seq seq{a.seed, static_cast<std::uint64_t>(i)};
    std::mt19937_64 rng(seq);
    for (std::size_t c = 0; c < a.crops; ++c) {
      const std::size_t offset = random_crop_offset(wave.samples.size(), rng);
      const auto crop = extract_features(crop_at(wave, offset), fc);
      char suffix[32];
      std::snprintf(suffix, sizeof suffix, "_c%02zu", c);
      const fs::path stem = a.out / u.speaker / (u.path.stem().string() + suffix);
      fs::create_directories(stem.parent_path());
      save_feature_crop(stem, crop, {u.path.generic_string(), a.seed, offset, fc});
      ++written;
    }
  }
  std::printf("cached %zu feature crops under %s\n", written, a.out.string().c_str());
  return kOk;
}

// -- train ------------------------------------------------------------------------

struct TrainArgs {
  fs::path manifest;
  fs::path out = "run";
  fs::path config;
  std::vector<std::string> sets;
  bool dump_config = false;
  bool quiet = false;
  TrainConfig cfg;
};

int cmd_train(TrainArgs& a, const CLI::App& sub) {
  // Precedence: defaults < --config file < --set < dedicated flags. Giving the
  // same key both as --set and as a flag is ambiguous and rejected.
  static const std::map<std::string, std::string> flag_keys = {
      {"--lambda-tri", "lambda_tri"}, {"--lambda-npair", "lambda_npair"}, {"--lambda-ang", "lambda_ang"},
      {"--lambda-soft", "lambda_soft"}, {"--alpha-deg", "alpha_deg"},     {"--margin", "margin"},
      {"--p", "p"},                    {"--k", "k"},                       {"--lr", "lr"},
      {"--pretrain-epochs", "pretrain_epochs"}, {"--epochs", "epochs"},   {"--seed", "seed"}};

  TrainConfig cfg;
  if (!a.config.empty()) load_config_file(a.config, cfg);
  for (const auto& s : a.sets) {
    const auto [key, value] = split_setting(s);
    for (const auto& [flag, k] : flag_keys) {
      if (k == key && sub.get_option(flag)->count() > 0) {
        throw ContractError("'" + key + "' given both as " + flag + " and via --set");
      }
    }
    apply_setting(cfg, key, value);
  }
  const auto flagged = [&](const char* flag) { return sub.get_option(flag)->count() > 0; };
  if (flagged("--lambda-tri")) cfg.weights.lambda_tri = a.cfg.weights.lambda_tri;
  if (flagged("--lambda-npair")) cfg.weights.lambda_npair = a.cfg.weights.lambda_npair;
  if (flagged("--lambda-ang")) cfg.weights.lambda_ang = a.cfg.weights.lambda_ang;
  if (flagged("--lambda-soft")) cfg.weights.lambda_soft = a.cfg.weights.lambda_soft;
  if (flagged("--alpha-deg")) cfg.weights.angular_alpha_deg = a.cfg.weights.angular_alpha_deg;
  if (flagged("--margin")) cfg.weights.triplet_margin = a.cfg.weights.triplet_margin;
  if (flagged("--p")) cfg.P = a.cfg.P;
  if (flagged("--k")) cfg.K = a.cfg.K;
  if (flagged("--lr")) cfg.adam.lr = a.cfg.adam.lr;
  if (flagged("--pretrain-epochs")) cfg.pretrain_epochs = a.cfg.pretrain_epochs;
  if (flagged("--epochs")) cfg.epochs = a.cfg.epochs;
  if (flagged("--seed")) cfg.seed = a.cfg.seed;
  cfg.validate();

  if (a.dump_config) {
    std::fputs(dump_config(cfg).c_str(), stdout);
    return kOk;
  }
  if (a.manifest.empty()) throw ContractError("train: --manifest is required");

  const Dataset data = read_manifest(a.manifest);
  std::size_t eligible = 0;
  for (const auto& utts : data.by_speaker) eligible += utts.size() >= cfg.K ? 1 : 0;
  if (eligible < cfg.P) {
    throw DataError("train: P=" + std::to_string(cfg.P) + " speakers with K=" + std::to_string(cfg.K) +
                    " utterances each are needed, the manifest has " + std::to_string(eligible));
  }

  fs::create_directories(a.out);
  {
    std::ofstream conf(a.out / "config.txt", std::ios::trunc);
    conf << dump_config(cfg);
  }
  TrainOptions opts;
  opts.out_dir = a.out;
  const std::size_t total_epochs = cfg.pretrain_epochs + cfg.epochs;
  if (!a.quiet) {
    opts.on_epoch = [total_epochs](const EpochSummary& s) {
      std::printf("epoch %zu/%zu [%s] mean loss %.6f (%.1f s)\n", s.epoch, total_epochs, to_string(s.phase).c_str(),
                  s.mean_total, s.seconds);
      std::fflush(stdout);
    };
  }
  train(data, cfg, opts);
  std::printf("model written to %s\n", (a.out / "model").string().c_str());
  return kOk;
}

// -- eval -------------------------------------------------------------------------

struct EvalArgs {
  fs::path checkpoint;
  fs::path trials;
  fs::path score_file;
  fs::path out = "eval";
  std::string metric = "cosine";
};

int cmd_eval(const EvalArgs& a) {
  const DistanceMetric metric = parse_distance_metric(a.metric);
  std::vector<TrialPair> trials;
  ScoreSet scores;
  std::string metric_name = to_string(metric);
  if (!a.score_file.empty()) {
    if (!a.checkpoint.empty() || !a.trials.empty()) {
      throw ContractError("eval: --score-file cannot be combined with --checkpoint/--trials");
    }
    scores = read_scores_csv(a.score_file, &trials);
    metric_name = "external";
  } else {
    if (a.checkpoint.empty() || a.trials.empty()) throw ContractError("eval: --checkpoint and --trials are required");
    if (!fs::exists(a.checkpoint)) throw DataError("checkpoint not found: " + a.checkpoint.string());
    if (!fs::exists(a.trials)) throw DataError("trial file not found: " + a.trials.string());
    const Checkpoint model = load_checkpoint(a.checkpoint);
    auto result = evaluate(a.trials, model, metric);
    trials = std::move(result.trials);
    scores = std::move(result.scores);
  }
  const EERResult eer = compute_eer(scores);
  const auto det = det_points(scores);
  write_scores_csv(a.out / "scores.csv", trials, scores);
  write_eer_json(a.out / "eer.json", eer, scores, metric_name);
  write_det_csv(a.out / "det.csv", det);
  write_det_svg(a.out / "det.svg", det, eer);
  std::printf("EER=%.4f%%\n", 100.0 * eer.eer);
  return kOk;
}

int report(const char* kind, const std::exception& e, int code) {
  std::fprintf(stderr, "metricforge: %s: %s\n", kind, e.what());
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Deep multi-metric speaker verification toolkit", "metricforge"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "metricforge 0.1.0");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic toy-speaker corpus with trials");
  s->add_option("--speakers", synth.cfg.num_speakers, "Training speakers")->capture_default_str();
  s->add_option("--heldout", synth.cfg.heldout_speakers, "Held-out speakers for trials")->capture_default_str();
  s->add_option("--utts", synth.cfg.utts_per_speaker, "Utterances per speaker")->capture_default_str();
  s->add_option("--duration", synth.cfg.duration_s, "Utterance length in seconds")->capture_default_str();
  s->add_option("--targets", synth.cfg.num_target, "Target trials")->capture_default_str();
  s->add_option("--nontargets", synth.cfg.num_nontarget, "Nontarget trials")->capture_default_str();
  s->add_option("--seed", synth.cfg.seed, "Master seed")->capture_default_str();
  s->add_option("--out", synth.out, "Output directory (created)")->capture_default_str();

  FeatureArgs feats;
  auto* f = app.add_subcommand("features", "Cache normalized spectrogram crops for a manifest");
  f->add_option("--manifest", feats.manifest, "Utterance manifest")->required();
  f->add_option("--out", feats.out, "Cache directory")->capture_default_str();
  f->add_option("--seed", feats.seed, "Crop seed")->capture_default_str();
  f->add_option("--crops", feats.crops, "Random crops per utterance")->capture_default_str();
  f->add_option("--spectrum", feats.spectrum, "magnitude or power")->capture_default_str();
  f->add_flag("--log", feats.log, "Log-compress before normalization");
  f->add_option("--norm", feats.norm, "per-bin or none")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Softmax pretraining followed by multi-loss training");
  t->add_option("--manifest", tr.manifest, "Training manifest");
  t->add_option("--out", tr.out, "Run directory (metrics.csv, checkpoints/, model/)")->capture_default_str();
  t->add_option("--config", tr.config, "key=value configuration file");
  t->add_option("--set", tr.sets, "Override a configuration key (key=value); repeatable");
  t->add_option("--lambda-tri", tr.cfg.weights.lambda_tri, "Triplet loss weight")->capture_default_str();
  t->add_option("--lambda-npair", tr.cfg.weights.lambda_npair, "N-pair loss weight")->capture_default_str();
  t->add_option("--lambda-ang", tr.cfg.weights.lambda_ang, "Angular loss weight")->capture_default_str();
  t->add_option("--lambda-soft", tr.cfg.weights.lambda_soft, "Softmax loss weight")->capture_default_str();
  t->add_option("--alpha-deg", tr.cfg.weights.angular_alpha_deg, "Angular loss alpha (degrees)")->capture_default_str();
  t->add_option("--margin", tr.cfg.weights.triplet_margin, "Triplet margin")->capture_default_str();
  t->add_option("--p", tr.cfg.P, "Speakers per batch")->capture_default_str();
  t->add_option("--k", tr.cfg.K, "Utterances per speaker per batch")->capture_default_str();
  t->add_option("--lr", tr.cfg.adam.lr, "Adam learning rate")->capture_default_str();
  t->add_option("--pretrain-epochs", tr.cfg.pretrain_epochs, "Softmax-only epochs")->capture_default_str();
  t->add_option("--epochs", tr.cfg.epochs, "Multi-loss epochs")->capture_default_str();
  t->add_option("--seed", tr.cfg.seed, "Training seed")->capture_default_str();
  t->add_flag("--dump-config", tr.dump_config, "Print the resolved configuration and exit");
  t->add_flag("--quiet", tr.quiet, "No per-epoch progress");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a trial list and report EER");
  e->add_option("--checkpoint", ev.checkpoint, "Model directory");
  e->add_option("--trials", ev.trials, "Trial list (label path_a path_b)");
  e->add_option("--score-file", ev.score_file, "Score an existing label,path_a,path_b,score CSV instead");
  e->add_option("--out", ev.out, "Output directory")->capture_default_str();
  e->add_option("--metric", ev.metric, "cosine or squared_euclidean")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (s->parsed()) return cmd_synth(synth);
    if (f->parsed()) return cmd_features(feats);
    if (t->parsed()) return cmd_train(tr, *t);
    if (e->parsed()) return cmd_eval(ev);
  } catch (const ContractError& err) {
    return report("usage error", err, kUsage);
  } catch (const NumericError& err) {
    return report("numeric failure", err, kNumeric);
  } catch (const DataError& err) {
    return report("data error", err, kData);
  } catch (const ShapeError& err) {
    return report("data error", err, kData);
  } catch (const std::exception& err) {
    return report("error", err, kData);
  }
  return kUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace metricforge::cli
