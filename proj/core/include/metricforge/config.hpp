#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "metricforge/trainer.hpp"

namespace metricforge {

// Flat `key = value` training configuration. Lists are comma separated,
// booleans accept true/false/1/0, `#` starts a comment.
//
//   lambda_npair lambda_soft lambda_tri lambda_ang margin alpha_deg
//   triplet_space angular_space npair_space          (normalized | raw)
//   p k lr beta1 beta2 eps pretrain_epochs epochs seed checkpoint_every
//   channels blocks se_stages se_reduction embedding_dim
//   spectrum (magnitude | power) log norm (per-bin | none)
//
// Unknown keys and malformed values raise a ContractError.
void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value);

// Parses `key=value` into its two halves (whitespace trimmed).
std::pair<std::string, std::string> split_setting(const std::string& text);

void load_config_file(const std::filesystem::path& path, TrainConfig& cfg);

const std::vector<std::string>& config_keys();

// One `key = value` line per key, in config_keys() order; round-trips
// through load_config_file.
std::string dump_config(const TrainConfig& cfg);

}  // namespace metricforge
