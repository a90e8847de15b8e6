#include "cprobe/pipeline/config.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <set>

#include "cprobe/core/binary_io.h"
#include "cprobe/core/errors.h"

extern char** environ;

namespace cprobe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::set<std::string> kSections{"paths", "corpus", "gpt", "train", "sae", "audit", "generate"};
const std::set<std::string> kSaeLayerFields{"hidden_dim", "k", "max_epochs", "patience", "lr", "batch_size", "center"};

bool is_count(const json& v) { return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0); }

[[noreturn]] void fail(const std::string& path, const std::string& msg) { throw ConfigError(path + ": " + msg); }

// Reader over one section that type-checks and records the field path.
class Fields {
 public:
  Fields(const json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {}

  std::string path(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  std::uint64_t uint(const std::string& key) const {
    const json& v = obj_.at(key);
    if (!is_count(v)) fail(path(key), "expected a non-negative integer, got " + v.dump());
    return v.get<std::uint64_t>();
  }
  double real(const std::string& key) const {
    const json& v = obj_.at(key);
    if (!v.is_number()) fail(path(key), "expected a number, got " + v.dump());
    return v.get<double>();
  }
  bool flag(const std::string& key) const {
    const json& v = obj_.at(key);
    if (!v.is_boolean()) fail(path(key), "expected true or false, got " + v.dump());
    return v.get<bool>();
  }
  std::string text(const std::string& key) const {
    const json& v = obj_.at(key);
    if (!v.is_string()) fail(path(key), "expected a string, got " + v.dump());
    return v.get<std::string>();
  }

 private:
  const json& obj_;
  std::string prefix_;
};

// Overlays `patch` onto `base`, refusing keys the defaults do not define.
// sae.overrides is free-form here and checked when parsed.
void strict_merge(json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) fail(prefix.empty() ? "<root>" : prefix, "expected an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) fail(path, "unknown field");
    if (path == "sae.overrides" || path == "layers") {
      base[key] = value;
    } else if (base[key].is_object()) {
      strict_merge(base[key], value, path);
    } else {
      base[key] = value;
    }
  }
}

std::string resolve(const std::string& p, const std::string& base_dir) {
  if (p.empty()) return p;
  fs::path path(p);
  if (path.is_relative() && !base_dir.empty()) path = fs::path(base_dir) / path;
  return path.lexically_normal().string();
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

std::vector<std::uint32_t> PipelineConfig::resolved_layers() const {
  std::vector<std::uint32_t> out = layers;
  if (out.empty()) {
    for (std::uint32_t l = 1; l <= gpt.layers; ++l) out.push_back(l);
  }
  std::sort(out.begin(), out.end());
  return out;
}

SaeConfig PipelineConfig::sae_config(std::uint32_t layer) const {
  SaeConfig c;
  c.layer = layer;
  c.input_dim = gpt.embed_dim;
  c.hidden_dim = sae.hidden_dim;
  c.k = sae.k;
  c.max_epochs = sae.max_epochs;
  c.patience = sae.patience;
  c.lr = sae.lr;
  c.batch_size = sae.batch_size;
  c.center = sae.center;
  c.seed = sae_seed(layer);
  if (auto it = sae.overrides.find(layer); it != sae.overrides.end()) {
    const Fields f(it->second, "sae.overrides." + std::to_string(layer));
    const json& o = it->second;
    if (o.contains("hidden_dim")) c.hidden_dim = f.uint("hidden_dim");
    if (o.contains("k")) c.k = f.uint("k");
    if (o.contains("max_epochs")) c.max_epochs = f.uint("max_epochs");
    if (o.contains("patience")) c.patience = f.uint("patience");
    if (o.contains("lr")) c.lr = f.real("lr");
    if (o.contains("batch_size")) c.batch_size = f.uint("batch_size");
    if (o.contains("center")) c.center = f.flag("center");
  }
  return c;
}

void PipelineConfig::validate(bool check_paths) const {
  if (!(corpus.train_ratio > 0.0 && corpus.train_ratio < 1.0)) fail("corpus.train_ratio", "must lie in (0, 1)");
  if (corpus.min_words == 0) fail("corpus.min_words", "must be positive");
  if (corpus.min_words > corpus.max_words) fail("corpus.min_words", "exceeds corpus.max_words");

  if (gpt.embed_dim == 0) fail("gpt.embed_dim", "must be positive");
  if (gpt.layers == 0) fail("gpt.layers", "must be positive");
  if (gpt.heads == 0) fail("gpt.heads", "must be positive");
  if (gpt.embed_dim % gpt.heads != 0) fail("gpt.heads", "must divide gpt.embed_dim");
  if (!(gpt.dropout >= 0.0 && gpt.dropout < 1.0)) fail("gpt.dropout", "must lie in [0, 1)");
  if (gpt.context_length < 2) fail("gpt.context_length", "must be at least 2");

  if (!(train.lr > 0.0 && std::isfinite(train.lr))) fail("train.lr", "must be positive");
  if (!(train.weight_decay >= 0.0)) fail("train.weight_decay", "must be non-negative");
  if (train.batch_size == 0) fail("train.batch_size", "must be positive");
  if (train.steps == 0) fail("train.steps", "must be positive");
  if (train.eval_interval == 0) fail("train.eval_interval", "must be positive");
  if (train.eval_windows == 0) fail("train.eval_windows", "must be positive");
  if (train.seq_len > gpt.context_length) fail("train.seq_len", "exceeds gpt.context_length");

  if (!(sae.train_ratio > 0.0 && sae.train_ratio < 1.0)) fail("sae.train_ratio", "must lie in (0, 1)");
  for (const auto& [layer, o] : sae.overrides) {
    const std::string path = "sae.overrides." + std::to_string(layer);
    if (layer == 0 || layer > gpt.layers) fail(path, "no such model layer");
    if (!o.is_object()) fail(path, "expected an object");
    for (const auto& [key, v] : o.items()) {
      if (!kSaeLayerFields.count(key)) fail(path + "." + key, "unknown field");
    }
  }
  for (std::uint32_t layer : resolved_layers()) {
    try {
      sae_config(layer).validate();
    } catch (const ConfigError& e) {
      fail("sae (layer " + std::to_string(layer) + ")", e.what());
    }
  }

  if (!std::isfinite(audit.fire)) fail("audit.fire", "must be finite");
  if (audit.min_prompts == 0) fail("audit.min_prompts", "must be positive");
  if (audit.min_prompts > audit.max_prompts) fail("audit.min_prompts", "exceeds audit.max_prompts");
  if (!(audit.secondary_floor >= 0.0)) fail("audit.secondary_floor", "must be non-negative");
  if (!(audit.leaning_at_most >= 0.0)) fail("audit.leaning_at_most", "must be non-negative");
  if (!(audit.leaning_at_most <= audit.dominant_above)) fail("audit.leaning_at_most", "exceeds audit.dominant_above");
  if (!(audit.dominant_above <= 1.0)) fail("audit.dominant_above", "must be at most 1");
  if (top_n == 0) fail("audit.top_n", "must be positive");

  if (!(generate.temperature >= 0.0 && std::isfinite(generate.temperature))) {
    fail("generate.temperature", "must be non-negative");
  }
  if (generate.prompt.empty()) fail("generate.prompt", "must not be empty");

  std::set<std::uint32_t> seen;
  for (std::uint32_t l : layers) {
    if (l == 0 || l > gpt.layers) fail("layers", "layer " + std::to_string(l) + " outside [1, " + std::to_string(gpt.layers) + "]");
    if (!seen.insert(l).second) fail("layers", "layer " + std::to_string(l) + " listed twice");
  }

  if (paths.work_dir.empty()) fail("paths.work_dir", "must be set");
  if (!check_paths) return;
  if (!fs::is_directory(paths.corpus_dir)) fail("paths.corpus_dir", "no such directory: " + paths.corpus_dir);
  const std::pair<const char*, const std::string*> files[] = {
      {"paths.manifest", &paths.manifest},
      {"paths.vocab_json", &paths.vocab_json},
      {"paths.merges", &paths.merges},
      {"paths.probes", &paths.probes},
  };
  for (const auto& [name, value] : files) {
    if (!fs::is_regular_file(*value)) fail(name, "no such file: " + *value);
  }
}

json config_to_json(const PipelineConfig& c) {
  json overrides = json::object();
  for (const auto& [layer, o] : c.sae.overrides) overrides[std::to_string(layer)] = o;
  return json{
      {"seed", c.seed},
      {"layers", c.layers},
      {"paths",
       {{"corpus_dir", c.paths.corpus_dir},
        {"manifest", c.paths.manifest},
        {"vocab_json", c.paths.vocab_json},
        {"merges", c.paths.merges},
        {"probes", c.paths.probes},
        {"work_dir", c.paths.work_dir}}},
      {"corpus",
       {{"train_ratio", c.corpus.train_ratio}, {"min_words", c.corpus.min_words}, {"max_words", c.corpus.max_words}}},
      {"gpt",
       {{"embed_dim", c.gpt.embed_dim},
        {"layers", c.gpt.layers},
        {"heads", c.gpt.heads},
        {"dropout", c.gpt.dropout},
        {"context_length", c.gpt.context_length}}},
      {"train",
       {{"lr", c.train.lr},
        {"weight_decay", c.train.weight_decay},
        {"batch_size", c.train.batch_size},
        {"steps", c.train.steps},
        {"eval_interval", c.train.eval_interval},
        {"eval_windows", c.train.eval_windows},
        {"seq_len", c.train.seq_len}}},
      {"sae",
       {{"hidden_dim", c.sae.hidden_dim},
        {"k", c.sae.k},
        {"max_epochs", c.sae.max_epochs},
        {"patience", c.sae.patience},
        {"lr", c.sae.lr},
        {"batch_size", c.sae.batch_size},
        {"center", c.sae.center},
        {"train_ratio", c.sae.train_ratio},
        {"overrides", overrides}}},
      {"audit",
       {{"fire", c.audit.fire},
        {"min_prompts", c.audit.min_prompts},
        {"max_prompts", c.audit.max_prompts},
        {"secondary_floor", c.audit.secondary_floor},
        {"dominant_above", c.audit.dominant_above},
        {"leaning_at_most", c.audit.leaning_at_most},
        {"top_n", c.top_n}}},
      {"generate",
       {{"prompt", c.generate.prompt}, {"max_new", c.generate.max_new}, {"temperature", c.generate.temperature}}},
  };
}

json default_config_json() { return config_to_json(PipelineConfig{}); }

PipelineConfig config_from_json(const json& doc, const std::string& base_dir) {
  json merged = default_config_json();
  strict_merge(merged, doc, "");

  PipelineConfig c;
  const Fields root(merged, "");
  c.seed = root.uint("seed");
  if (!merged["layers"].is_array()) fail("layers", "expected an array of layer numbers");
  for (const auto& v : merged["layers"]) {
    if (!is_count(v)) fail("layers", "expected non-negative integers, got " + v.dump());
    c.layers.push_back(v.get<std::uint32_t>());
  }

  const Fields p(merged["paths"], "paths");
  c.paths.corpus_dir = resolve(p.text("corpus_dir"), base_dir);
  c.paths.manifest = resolve(p.text("manifest"), base_dir);
  c.paths.vocab_json = resolve(p.text("vocab_json"), base_dir);
  c.paths.merges = resolve(p.text("merges"), base_dir);
  c.paths.probes = resolve(p.text("probes"), base_dir);
  c.paths.work_dir = resolve(p.text("work_dir"), base_dir);

  const Fields co(merged["corpus"], "corpus");
  c.corpus.train_ratio = co.real("train_ratio");
  c.corpus.min_words = co.uint("min_words");
  c.corpus.max_words = co.uint("max_words");

  const Fields g(merged["gpt"], "gpt");
  c.gpt.embed_dim = g.uint("embed_dim");
  c.gpt.layers = g.uint("layers");
  c.gpt.heads = g.uint("heads");
  c.gpt.dropout = g.real("dropout");
  c.gpt.context_length = g.uint("context_length");
  c.gpt.seed = c.gpt_seed();

  const Fields t(merged["train"], "train");
  c.train.lr = t.real("lr");
  c.train.weight_decay = t.real("weight_decay");
  c.train.batch_size = t.uint("batch_size");
  c.train.steps = t.uint("steps");
  c.train.eval_interval = t.uint("eval_interval");
  c.train.eval_windows = t.uint("eval_windows");
  c.train.seq_len = t.uint("seq_len");
  c.train.seed = c.train_seed();

  const Fields s(merged["sae"], "sae");
  c.sae.hidden_dim = s.uint("hidden_dim");
  c.sae.k = s.uint("k");
  c.sae.max_epochs = s.uint("max_epochs");
  c.sae.patience = s.uint("patience");
  c.sae.lr = s.real("lr");
  c.sae.batch_size = s.uint("batch_size");
  c.sae.center = s.flag("center");
  c.sae.train_ratio = s.real("train_ratio");
  const json& overrides = merged["sae"]["overrides"];
  if (!overrides.is_object()) fail("sae.overrides", "expected an object keyed by layer");
  for (const auto& [key, value] : overrides.items()) {
    std::uint32_t layer = 0;
    try {
      std::size_t used = 0;
      layer = static_cast<std::uint32_t>(std::stoul(key, &used));
      if (used != key.size()) throw std::invalid_argument(key);
    } catch (const std::exception&) {
      fail("sae.overrides." + key, "keys must be layer numbers");
    }
    c.sae.overrides[layer] = value;
  }

  const Fields a(merged["audit"], "audit");
  c.audit.fire = a.real("fire");
  c.audit.min_prompts = a.uint("min_prompts");
  c.audit.max_prompts = a.uint("max_prompts");
  c.audit.secondary_floor = a.real("secondary_floor");
  c.audit.dominant_above = a.real("dominant_above");
  c.audit.leaning_at_most = a.real("leaning_at_most");
  c.top_n = a.uint("top_n");

  const Fields ge(merged["generate"], "generate");
  c.generate.prompt = ge.text("prompt");
  c.generate.max_new = ge.uint("max_new");
  c.generate.temperature = ge.real("temperature");
  return c;
}

void apply_env_overrides(json& doc, const std::map<std::string, std::string>& env) {
  static const std::string kPrefix = "PIPELINE_";
  for (const auto& [name, raw] : env) {
    if (name.rfind(kPrefix, 0) != 0) continue;
    const std::string rest = lower(name.substr(kPrefix.size()));
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    if (rest == "seed" || rest == "layers") {
      doc[rest] = value;
      continue;
    }
    const auto sep = rest.find('_');
    const std::string section = rest.substr(0, sep);
    if (sep == std::string::npos || !kSections.count(section)) {
      throw ConfigError(name + ": expected PIPELINE_<SECTION>_<FIELD> with a section among paths, corpus, gpt, "
                               "train, sae, audit, generate");
    }
    if (!doc.contains(section)) doc[section] = json::object();
    doc[section][rest.substr(sep + 1)] = value;
  }
}

PipelineConfig load_pipeline_config(const std::string& path, const std::map<std::string, std::string>& env) {
  json doc = json::parse(read_file_text(path), nullptr, false);
  if (doc.is_discarded()) throw ConfigError(path + ": not valid JSON");
  apply_env_overrides(doc, env);
  const std::string base = fs::absolute(path).parent_path().string();
  PipelineConfig c = config_from_json(doc, base);
  c.validate();
  return c;
}

std::map<std::string, std::string> pipeline_environment() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    if (entry.rfind("PIPELINE_", 0) != 0) continue;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    out[entry.substr(0, eq)] = entry.substr(eq + 1);
  }
  return out;
}

}  // namespace cprobe
