#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cprobe/audit/audit.h"
#include "cprobe/core/binary_io.h"
#include "cprobe/core/errors.h"
#include "cprobe/pipeline/config.h"
#include "cprobe/pipeline/pipeline.h"
#include "pipeline_fixture.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cprobe {
namespace {

using testing::fresh_dir;
using testing::tiny_pipeline;
using testing::tiny_pipeline_json;

std::string config_error(const json& doc) {
  try {
    config_from_json(doc, "").validate();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

std::vector<json> read_jsonl(const std::string& path) {
  std::vector<json> out;
  std::istringstream in(read_file_text(path));
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

std::size_t error_records(const std::string& work) {
  std::size_t n = 0;
  for (const auto& r : read_jsonl(work + "/logs/run.jsonl")) n += r["level"] == "error";
  return n;
}

TEST(PipelineConfig, DefaultsRoundTrip) {
  const PipelineConfig c = config_from_json(json::object(), "");
  EXPECT_EQ(c.gpt.embed_dim, 896u);
  EXPECT_EQ(c.gpt.layers, 8u);
  EXPECT_DOUBLE_EQ(c.train.lr, 3e-4);
  EXPECT_EQ(c.sae.k, 50u);
  EXPECT_DOUBLE_EQ(c.audit.fire, 5.0);
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(c), "")), config_to_json(c));
}

TEST(PipelineConfig, UnknownFieldsAndBadTypesNameTheirPath) {
  EXPECT_NE(config_error({{"train", {{"stpes", 3}}}}).find("train.stpes: unknown field"), std::string::npos);
  EXPECT_NE(config_error({{"bogus", 1}}).find("bogus: unknown field"), std::string::npos);
  EXPECT_NE(config_error({{"train", {{"steps", -3}}}}).find("train.steps"), std::string::npos);
  EXPECT_NE(config_error({{"sae", {{"center", "yes"}}}}).find("sae.center"), std::string::npos);
}

TEST(PipelineConfig, ValidationNamesTheField) {
  const std::string work = fresh_dir("cfg_validate");
  auto with = [&](const json& patch) {
    json doc = tiny_pipeline_json(work);
    doc.merge_patch(patch);
    return config_error(doc);
  };
  EXPECT_EQ(with(json::object()), "");
  EXPECT_NE(with({{"audit", {{"min_prompts", 200}}}}).find("audit.min_prompts"), std::string::npos);
  EXPECT_NE(with({{"audit", {{"leaning_at_most", 0.9}}}}).find("audit.leaning_at_most"), std::string::npos);
  EXPECT_NE(with({{"gpt", {{"heads", 3}}}}).find("gpt.heads"), std::string::npos);
  EXPECT_NE(with({{"corpus", {{"train_ratio", 1.0}}}}).find("corpus.train_ratio"), std::string::npos);
  EXPECT_NE(with({{"layers", {3}}}).find("layers"), std::string::npos);
  EXPECT_NE(with({{"sae", {{"k", 1000}}}}).find("sae (layer 1)"), std::string::npos);
  EXPECT_NE(with({{"sae", {{"overrides", {{"2", {{"kk", 3}}}}}}}}).find("sae.overrides.2.kk"), std::string::npos);
  EXPECT_NE(with({{"paths", {{"probes", "/nonexistent/probes.jsonl"}}}}).find("paths.probes"), std::string::npos);
}

TEST(PipelineConfig, EnvironmentOverrides) {
  json doc = tiny_pipeline_json("/tmp/x");
  apply_env_overrides(doc, {{"PIPELINE_TRAIN_STEPS", "7"},
                            {"PIPELINE_TRAIN_WEIGHT_DECAY", "0.5"},
                            {"PIPELINE_AUDIT_TOP_N", "2"},
                            {"PIPELINE_GENERATE_PROMPT", "Once upon"},
                            {"PIPELINE_SEED", "11"},
                            {"UNRELATED", "1"}});
  const PipelineConfig c = config_from_json(doc, "");
  EXPECT_EQ(c.train.steps, 7u);
  EXPECT_DOUBLE_EQ(c.train.weight_decay, 0.5);
  EXPECT_EQ(c.top_n, 2u);
  EXPECT_EQ(c.generate.prompt, "Once upon");
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.train_seed(), 12u);

  json bad = json::object();
  EXPECT_THROW(apply_env_overrides(bad, {{"PIPELINE_NOPE_X", "1"}}), ConfigError);
  json unknown = json::object();
  apply_env_overrides(unknown, {{"PIPELINE_TRAIN_NOPE", "1"}});
  EXPECT_THROW(config_from_json(unknown, ""), ConfigError);
}

TEST(PipelineConfig, RelativePathsResolveAgainstTheConfigFile) {
  const std::string dir = fresh_dir("cfg_rel");
  write_file_text(dir + "/run.json", R"({"paths": {"work_dir": "out", "probes": "../p.jsonl"}})");
  const json doc = json::parse(read_file_text(dir + "/run.json"));
  const PipelineConfig c = config_from_json(doc, dir);
  EXPECT_EQ(c.paths.work_dir, (fs::path(dir) / "out").string());
  EXPECT_EQ(c.paths.probes, (fs::path(dir).parent_path() / "p.jsonl").string());
}

TEST(PipelineConfig, PerLayerSaeOverridesAndSeeds) {
  json doc = tiny_pipeline_json("/tmp/x");
  doc["sae"]["overrides"] = {{"2", {{"k", 6}, {"lr", 0.01}}}};
  const PipelineConfig c = config_from_json(doc, "");
  EXPECT_EQ(c.sae_config(1).k, 4u);
  EXPECT_EQ(c.sae_config(2).k, 6u);
  EXPECT_DOUBLE_EQ(c.sae_config(2).lr, 0.01);
  EXPECT_EQ(c.sae_config(2).seed, 3u + 100u + 2u);
  EXPECT_EQ(c.sae_config(1).input_dim, 16u);
  EXPECT_EQ(c.resolved_layers(), (std::vector<std::uint32_t>{1, 2}));
}

TEST(PipelineStages, NamesRoundTrip) {
  const auto stages = all_stages();
  ASSERT_EQ(stages.size(), 9u);
  for (Stage s : stages) EXPECT_EQ(parse_stage(stage_name(s)), s);
  EXPECT_EQ(parse_stage("train-sae"), Stage::kTrainSae);
  EXPECT_FALSE(parse_stage("train_sae").has_value());
}

TEST(PipelineStages, AuditBeforeTrainSaeNamesTrainSae) {
  const std::string work = fresh_dir("dep_audit");
  const PipelineConfig c = tiny_pipeline(work);
  RunLog log("", false);
  try {
    run_stage(Stage::kAudit, c, log, false);
    FAIL() << "audit ran without its inputs";
  } catch (const MissingArtifactError& e) {
    EXPECT_EQ(e.producer(), Stage::kTrainSae);
    EXPECT_NE(std::string(e.what()).find("train-sae"), std::string::npos);
  }

  const int rc = run_pipeline(c, {{Stage::kAudit}, false, false});
  EXPECT_NE(rc, 0);
  EXPECT_EQ(error_records(work), 1u);
}

TEST(PipelineStages, LockIsExclusive) {
  const std::string work = fresh_dir("lock");
  {
    WorkDirLock first(work);
    EXPECT_THROW(WorkDirLock second(work), LockError);
    // A locked work dir fails the run with an error record.
    EXPECT_NE(run_pipeline(tiny_pipeline(work), {{Stage::kPrepare}, false, false}), 0);
  }
  EXPECT_FALSE(fs::exists(work + "/.lock"));
  WorkDirLock again(work);
}

class PipelineRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    work_ = fresh_dir("e2e");
    rc_ = run_pipeline(tiny_pipeline(work_), {{}, false, false});
  }
  static void TearDownTestSuite() { fs::remove_all(work_); }
  static std::string work_;
  static int rc_;
};
std::string PipelineRun::work_;
int PipelineRun::rc_ = -1;

TEST_F(PipelineRun, CompletesWithoutErrorRecords) {
  ASSERT_EQ(rc_, 0);
  EXPECT_EQ(error_records(work_), 0u);
  for (Stage s : all_stages()) {
    const std::string m = work_ + "/" + std::string(stage_dir(s)) + "/manifest.json";
    ASSERT_TRUE(fs::exists(m)) << m;
    const StageManifest sm = read_stage_manifest(m);
    EXPECT_EQ(sm.stage, stage_name(s));
    EXPECT_FALSE(sm.outputs.empty());
    EXPECT_EQ(sm.config_hash.size(), 64u);
  }
}

TEST_F(PipelineRun, ReportTablesMatchTheCatalog) {
  ASSERT_EQ(rc_, 0);
  std::vector<NeuronAssignment> catalog;
  for (const auto& j : read_jsonl(work_ + "/audit/catalog.jsonl")) catalog.push_back(assignment_from_json_line(j.dump()));
  ASSERT_FALSE(catalog.empty());

  const json layers = json::parse(read_file_text(work_ + "/report/layer_summary.json"));
  std::size_t selective = 0;
  for (const auto& row : layers) {
    std::size_t recount = 0;
    for (const auto& a : catalog) recount += a.layer == row["layer"].get<std::uint32_t>();
    EXPECT_EQ(row["selective"].get<std::size_t>(), recount);
    selective += recount;
  }
  EXPECT_EQ(selective, catalog.size());

  const json concepts = json::parse(read_file_text(work_ + "/report/concept_summary.json"));
  ASSERT_EQ(concepts.size(), kConceptCount);
  std::size_t by_concept = 0;
  for (const auto& row : concepts) {
    std::size_t recount = 0;
    for (const auto& a : catalog) recount += concept_name(a.primary) == row["concept"].get<std::string>();
    EXPECT_EQ(row["count"].get<std::size_t>(), recount);
    by_concept += recount;
  }
  EXPECT_EQ(by_concept, catalog.size());

  const json top = json::parse(read_file_text(work_ + "/report/top_detectors.json"));
  EXPECT_EQ(top.size(), std::min<std::size_t>(5, catalog.size()));

  for (std::uint32_t l : {1u, 2u}) {
    const auto g = graph_from_json(read_file_text(work_ + "/report/graphs/layer_" + std::to_string(l) + ".json"));
    std::size_t edges = 0, dual = 0;
    for (const auto& e : g.edges) edges += e.count;
    for (const auto& a : catalog) dual += a.layer == l && a.secondary.has_value();
    EXPECT_EQ(edges, dual);
    EXPECT_EQ(graph_from_dot(read_file_text(work_ + "/report/graphs/layer_" + std::to_string(l) + ".dot")), g);
  }
}

TEST_F(PipelineRun, UnchangedInputsSkipAndChangesPropagate) {
  ASSERT_EQ(rc_, 0);
  PipelineConfig c = tiny_pipeline(work_);
  RunLog log("", false);
  for (Stage s : all_stages()) EXPECT_EQ(run_stage(s, c, log, false), StageOutcome::kSkipped) << stage_name(s);

  // A threshold change re-runs the audit only; report follows its new inputs.
  c.audit.fire = 0.06;
  EXPECT_EQ(run_stage(Stage::kTrainLm, c, log, false), StageOutcome::kSkipped);
  EXPECT_EQ(run_stage(Stage::kTrainSae, c, log, false), StageOutcome::kSkipped);
  EXPECT_EQ(run_stage(Stage::kAudit, c, log, false), StageOutcome::kRan);
  const bool catalog_changed = read_stage_manifest(work_ + "/report/manifest.json").inputs !=
                               read_stage_manifest(work_ + "/audit/manifest.json").outputs;
  EXPECT_EQ(run_stage(Stage::kReport, c, log, false),
            catalog_changed ? StageOutcome::kRan : StageOutcome::kSkipped);

  // A damaged output invalidates its stage; --force always runs.
  std::ofstream(work_ + "/generate/sample.txt", std::ios::app) << "tampered";
  EXPECT_EQ(run_stage(Stage::kGenerate, c, log, false), StageOutcome::kRan);
  EXPECT_EQ(run_stage(Stage::kGenerate, c, log, false), StageOutcome::kSkipped);
  EXPECT_EQ(run_stage(Stage::kGenerate, c, log, true), StageOutcome::kRan);
}

TEST_F(PipelineRun, LayerSelectionNeedsExtractedLayers) {
  ASSERT_EQ(rc_, 0);
  // Only layer 2 is extracted in a fresh dir; asking train-sae for layer 1
  // then points back at extract.
  const std::string work = fresh_dir("layers");
  PipelineConfig c = tiny_pipeline(work);
  c.layers = {2};
  RunLog log("", false);
  for (Stage s : {Stage::kPrepare, Stage::kTrainLm, Stage::kExtract}) run_stage(s, c, log, false);
  EXPECT_TRUE(fs::exists(work + "/activations/layer_2.bin"));
  EXPECT_FALSE(fs::exists(work + "/activations/layer_1.bin"));
  c.layers = {1, 2};
  try {
    run_stage(Stage::kTrainSae, c, log, false);
    FAIL() << "train-sae ran without layer 1 activations";
  } catch (const MissingArtifactError& e) {
    EXPECT_EQ(e.producer(), Stage::kExtract);
  }
}

}  // namespace
}  // namespace cprobe
