// Command-line entry point: runs pipeline stages from a JSON run config.

#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cprobe/core/binary_io.h"
#include "cprobe/core/errors.h"
#include "cprobe/pipeline/config.h"
#include "cprobe/pipeline/pipeline.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<std::uint32_t> parse_layers(const std::string& text) {
  std::vector<std::uint32_t> out;
  std::istringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    if (item.empty()) continue;
    std::size_t used = 0;
    const unsigned long v = std::stoul(item, &used);
    if (used != item.size()) throw cprobe::ConfigError("--layers: not a layer number: " + item);
    out.push_back(static_cast<std::uint32_t>(v));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train a small GPT, fit per-layer sparse autoencoders and audit their latents against concepts"};
  std::string config_path;
  std::string stage_arg = "all";
  bool force = false;
  bool quiet = false;
  std::optional<std::uint64_t> seed;
  std::string layers_arg;
  std::string out_dir;
  app.add_option("--config", config_path, "run config (JSON)")->required()->check(CLI::ExistingFile);
  app.add_option("--stage", stage_arg,
                 "stage to run: prepare, train-lm, eval-lm, extract, train-sae, eval-sae, audit, report, "
                 "generate, or all (comma-separated list allowed)");
  app.add_flag("--force", force, "re-run stages even when their inputs are unchanged");
  app.add_option("--seed", seed, "global seed (overrides the config)");
  app.add_option("--layers", layers_arg, "layers to process, e.g. 1,3 (overrides the config)");
  app.add_option("--out", out_dir, "work directory (overrides paths.work_dir)");
  app.add_flag("--quiet", quiet, "no summary on standard output");
  CLI11_PARSE(app, argc, argv);

  cprobe::PipelineConfig config;
  cprobe::RunOptions options;
  try {
    json doc = json::parse(cprobe::read_file_text(config_path), nullptr, false);
    if (doc.is_discarded()) throw cprobe::ConfigError(config_path + ": not valid JSON");
    cprobe::apply_env_overrides(doc, cprobe::pipeline_environment());
    if (seed) doc["seed"] = *seed;
    if (!layers_arg.empty()) doc["layers"] = parse_layers(layers_arg);
    if (!out_dir.empty()) doc["paths"]["work_dir"] = fs::absolute(out_dir).string();
    config = cprobe::config_from_json(doc, fs::absolute(config_path).parent_path().string());
    config.validate();

    if (stage_arg != "all") {
      std::istringstream in(stage_arg);
      for (std::string name; std::getline(in, name, ',');) {
        const auto s = cprobe::parse_stage(name);
        if (!s) throw cprobe::ConfigError("--stage: unknown stage '" + name + "'");
        options.stages.push_back(*s);
      }
    }
  } catch (const std::exception& e) {
    std::cerr << json{{"level", "error"}, {"stage", "config"}, {"event", "invalid"}, {"message", e.what()}}.dump()
              << '\n';
    return 2;
  }
  options.force = force;
  options.echo = !quiet;
  return cprobe::run_pipeline(config, options);
}
