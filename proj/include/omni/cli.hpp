// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "omni/config.hpp"
#include "omni/data.hpp"
#include "omni/training.hpp"

namespace omni::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,  // divergence or an unexpected internal error
  kConfigError = 2,
  kDataError = 3,
  kCheckpointError = 4,
  kDenseModel = 5,
};

/// Environment variable naming the default output directory.
inline constexpr const char* kOutDirEnv = "OMNI_OUT_DIR";

/// Everything `train` needs, assembled from a key=value file and overrides.
struct RunConfig {
  std::vector<Variant> variants{Variant::Omni};
  ModelConfig model;  // variant, vocab_size and feat_dim are filled per run
  TrainConfig train;

  bool synth = false;
  SynthSpec synth_spec;
  std::size_t synth_utterances = 2000;
  double heldout_fraction = 0.1;
  std::string data_dir;
  std::string heldout_dir;
  std::string alphabet;  // empty: the synthetic alphabet of alphabet_size

  std::string out_dir;
  std::size_t checkpoint_every = 0;
  std::size_t log_every = 100;
  std::size_t smoothing_window = 50;

  std::vector<std::string> explicit_keys;  // keys set by the file or overrides

  RunConfig();
};

struct SchemaEntry {
  std::string key;
  std::string type;  // integer, real, bool, string, variants
  std::string help;
};

/// Every accepted key, in documentation order.
const std::vector<SchemaEntry>& config_schema();

/// Applies one key=value assignment. Throws ConfigError naming the key when
/// it is unknown or its value does not parse.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);

/// Parses "key = value" lines; '#' starts a comment. Throws ConfigError.
void apply_config_text(RunConfig& config, std::istream& text);

/// Cross-field checks (dense with experts != 1, MoE with fewer than two
/// experts, missing data source). Throws ConfigError.
void validate(const RunConfig& config);

/// Resolved configuration in the same key=value format.
std::string to_config_text(const RunConfig& config);

/// Entry point of the omni executable.
int run(int argc, const char* const* argv);

}  // namespace omni::cli
