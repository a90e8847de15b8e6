#pragma once

// Run description for the staged pipeline: one JSON document, optionally
// patched by PIPELINE_<SECTION>_<FIELD> environment variables.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cprobe/audit/audit.h"
#include "cprobe/gpt/gpt.h"
#include "cprobe/gpt/train.h"
#include "cprobe/sae/sae.h"

namespace cprobe {

struct PipelinePaths {
  std::string corpus_dir;
  std::string manifest;
  std::string vocab_json;
  std::string merges;
  std::string probes;
  std::string work_dir;
};

struct CorpusSettings {
  double train_ratio = 0.9;
  std::size_t min_words = 5;
  std::size_t max_words = 60;
};

// Shared SAE hyperparameters; `overrides` patches them per layer with the
// same field names ("k", "lr", ...).
struct SaeSettings {
  std::size_t hidden_dim = 0;
  std::size_t k = 50;
  std::size_t max_epochs = 500;
  std::size_t patience = 10;
  double lr = 1e-3;
  std::size_t batch_size = 256;
  bool center = false;
  double train_ratio = 0.9;  // sentence groups sent to SAE training
  std::map<std::uint32_t, nlohmann::json> overrides;
};

struct GenerateSettings {
  std::string prompt = "It is a truth universally acknowledged";
  std::size_t max_new = 40;
  double temperature = 0.8;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  PipelinePaths paths;
  CorpusSettings corpus;
  GptConfig gpt;  // vocab_size is taken from the vocabulary files
  TrainRunConfig train;
  SaeSettings sae;
  AuditThresholds audit;
  std::size_t top_n = 10;
  GenerateSettings generate;
  std::vector<std::uint32_t> layers;  // empty: every model layer

  // Selected layers, ascending.
  std::vector<std::uint32_t> resolved_layers() const;
  // Layer L's SAE: shared settings, the layer override and the seed rule.
  SaeConfig sae_config(std::uint32_t layer) const;
  // Seeds derived from the global one.
  std::uint64_t gpt_seed() const { return seed; }
  std::uint64_t train_seed() const { return seed + 1; }
  std::uint64_t split_seed() const { return seed + 2; }
  std::uint64_t sae_seed(std::uint32_t layer) const { return seed + 100 + layer; }

  // Field-path errors ("audit.min_prompts: ...") as ConfigError. Paths are
  // only checked when `check_paths` is set.
  void validate(bool check_paths = true) const;
};

// The full document with every default filled in.
nlohmann::json default_config_json();

// Environment overrides: every PIPELINE_* entry of `env`. The value is read
// as JSON when it parses, else as a string. PIPELINE_SEED and
// PIPELINE_LAYERS set top-level keys.
void apply_env_overrides(nlohmann::json& doc, const std::map<std::string, std::string>& env);

// Unknown keys and wrong types raise ConfigError with the field path.
// Relative paths resolve against `base_dir`.
PipelineConfig config_from_json(const nlohmann::json& doc, const std::string& base_dir);
nlohmann::json config_to_json(const PipelineConfig& config);

// Reads `path`, merges it over the defaults, applies `env` and validates.
PipelineConfig load_pipeline_config(const std::string& path, const std::map<std::string, std::string>& env = {});

// The PIPELINE_* variables of the current process.
std::map<std::string, std::string> pipeline_environment();

}  // namespace cprobe
