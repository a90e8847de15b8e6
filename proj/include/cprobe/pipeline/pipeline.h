#pragma once

// Staged pipeline over a work directory. Stages talk only through files;
// each stage directory carries manifest.json with the stage's config hash
// and the SHA-256 of every input and output, and a stage whose manifest
// still matches is skipped unless forced.

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cprobe/core/errors.h"
#include "cprobe/pipeline/config.h"

namespace cprobe {

enum class Stage : std::uint8_t {
  kPrepare,
  kTrainLm,
  kEvalLm,
  kExtract,
  kTrainSae,
  kEvalSae,
  kAudit,
  kReport,
  kGenerate,
};

std::string_view stage_name(Stage s);
std::optional<Stage> parse_stage(std::string_view name);
// Execution order of a full run.
std::vector<Stage> all_stages();
// Directory of the stage's artifacts, relative to the work dir.
std::string_view stage_dir(Stage s);

// A required upstream artifact is absent; the message names the stage that
// produces it.
class MissingArtifactError : public Error {
 public:
  MissingArtifactError(const std::string& what, Stage producer) : Error(what), producer_(producer) {}
  Stage producer() const { return producer_; }

 private:
  Stage producer_;
};

// Another run holds the work dir.
class LockError : public Error {
 public:
  using Error::Error;
};

// Line-delimited JSON records ({"level", "stage", "event", ...}) appended to
// a file, plus one-line human summaries on stdout when `echo` is set.
class RunLog {
 public:
  RunLog(const std::string& path, bool echo);

  void info(std::string_view stage, std::string_view event, nlohmann::json fields = nlohmann::json::object());
  void warn(std::string_view stage, std::string_view event, nlohmann::json fields = nlohmann::json::object());
  void error(std::string_view stage, std::string_view event, nlohmann::json fields = nlohmann::json::object());
  // Free-text line for the human summary only.
  void say(const std::string& line);

  std::size_t errors() const { return errors_; }

 private:
  void write(std::string_view level, std::string_view stage, std::string_view event, nlohmann::json fields);

  std::ofstream out_;
  bool echo_;
  std::size_t errors_ = 0;
};

// Exclusive hold on <work_dir>/.lock for one process; released on scope exit.
class WorkDirLock {
 public:
  explicit WorkDirLock(const std::string& work_dir);
  ~WorkDirLock();
  WorkDirLock(const WorkDirLock&) = delete;
  WorkDirLock& operator=(const WorkDirLock&) = delete;

 private:
  std::string path_;
};

enum class StageOutcome : std::uint8_t { kRan, kSkipped };

// Runs one stage. Throws MissingArtifactError when an upstream stage has not
// produced its artifacts.
StageOutcome run_stage(Stage stage, const PipelineConfig& config, RunLog& log, bool force);

struct RunOptions {
  std::vector<Stage> stages;  // empty: all, in order
  bool force = false;
  bool echo = true;
};

// Takes the lock, runs the stages in order and logs to
// <work_dir>/logs/run.jsonl. Stops at the first failing stage; every failure
// is recorded as an error record. Returns 0 iff no error record was written.
int run_pipeline(const PipelineConfig& config, const RunOptions& options);

// Stage manifest (manifest.json inside the stage directory).
struct StageManifest {
  std::string stage;
  std::string config_hash;
  nlohmann::json config;
  std::vector<std::pair<std::string, std::string>> inputs;   // work-dir relative path (or absolute), sha256
  std::vector<std::pair<std::string, std::string>> outputs;  // work-dir relative path, sha256
  std::string version;
};

StageManifest read_stage_manifest(const std::string& path);

inline constexpr std::string_view kPipelineVersion = "cprobe-0.1.0";

}  // namespace cprobe
