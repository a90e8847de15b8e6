#pragma once

// A small pipeline config over the bundled toy assets, and fresh temporary
// work dirs (per process, so parallel ctest runs do not collide).

#include <unistd.h>

#include <filesystem>
#include <string>

#include <json.hpp>

#include "cprobe/pipeline/config.h"
#include "toy_assets.h"

namespace cprobe::testing {

inline nlohmann::json tiny_pipeline_json(const std::string& work_dir) {
  return {
      {"seed", 3},
      {"paths",
       {{"corpus_dir", data_path("toy/corpus")},
        {"manifest", data_path("toy/corpus/manifest.json")},
        {"vocab_json", data_path("toy/vocab/vocab.json")},
        {"merges", data_path("toy/vocab/merges.txt")},
        {"probes", data_path("toy/probes.jsonl")},
        {"work_dir", work_dir}}},
      {"gpt", {{"embed_dim", 16}, {"layers", 2}, {"heads", 2}, {"dropout", 0.0}, {"context_length", 48}}},
      {"train", {{"lr", 3e-3}, {"steps", 20}, {"eval_interval", 10}, {"eval_windows", 2}, {"batch_size", 4}}},
      {"sae", {{"k", 4}, {"max_epochs", 3}, {"patience", 2}, {"batch_size", 256}}},
      {"audit", {{"fire", 0.05}, {"min_prompts", 2}, {"max_prompts", 120}, {"top_n", 5}}},
      {"generate", {{"max_new", 5}}},
  };
}

inline std::string fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("cprobe_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

inline PipelineConfig tiny_pipeline(const std::string& work_dir) {
  PipelineConfig c = config_from_json(tiny_pipeline_json(work_dir), "");
  c.validate();
  return c;
}

}  // namespace cprobe::testing
