#pragma once

#include <map>
#include <string>

#include "mps/dataset.hpp"
#include "mps/model.hpp"
#include "mps/training.hpp"

namespace mps {

/// Merged view of everything a run needs. The top-level seed propagates to
/// the generator, split, and training seeds unless a section overrides it.
struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  int vocab_cap = 2048;  // token budget when building the vocabulary
  GeneratorConfig generator;
  SplitFractions split;
  ModelConfig model;  // encoder.vocab_size is filled in once the vocabulary exists
  TrainConfig train;

  void propagate_seed();
};

/// Keys are "section.key" ("" section for top-level keys); values are the
/// raw strings from the file.
using ConfigKV = std::map<std::string, std::string>;

/// TOML-like subset: [section] headers, key = value lines, # comments.
/// Values may be quoted strings, booleans, or numbers.
ConfigKV parse_config_file(const std::string& path);
ConfigKV parse_config_text(const std::string& text);

/// Applies one key to the config; throws on unknown keys or bad values.
void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value);

RunConfig run_config_from_kv(const ConfigKV& kv);
RunConfig load_run_config(const std::string& path);

/// Canonical JSON used for fingerprints and reports.
std::string run_config_dump(const RunConfig& cfg);

}  // namespace mps
