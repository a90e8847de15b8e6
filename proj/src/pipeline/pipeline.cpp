#include "cprobe/pipeline/pipeline.h"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "cprobe/activations/activations.h"
#include "cprobe/audit/audit.h"
#include "cprobe/core/binary_io.h"
#include "cprobe/core/errors.h"
#include "cprobe/core/hash.h"
#include "cprobe/corpus/corpus.h"
#include "cprobe/gpt/gpt.h"
#include "cprobe/gpt/train.h"
#include "cprobe/sae/sae.h"
#include "cprobe/tokenizer/bpe.h"

namespace cprobe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::pair<Stage, std::string_view> kStageNames[] = {
    {Stage::kPrepare, "prepare"},   {Stage::kTrainLm, "train-lm"}, {Stage::kEvalLm, "eval-lm"},
    {Stage::kExtract, "extract"},   {Stage::kTrainSae, "train-sae"}, {Stage::kEvalSae, "eval-sae"},
    {Stage::kAudit, "audit"},       {Stage::kReport, "report"},    {Stage::kGenerate, "generate"},
};

std::string layer_file(std::string_view dir, std::uint32_t layer, std::string_view ext) {
  return std::string(dir) + "/layer_" + std::to_string(layer) + std::string(ext);
}

// Everything a stage body needs besides the config.
struct StageContext {
  const PipelineConfig& config;
  RunLog& log;
  std::string work;
  std::string_view name;

  std::string abs(const std::string& rel) const { return work + "/" + rel; }
};

struct StagePlan {
  json config;
  std::vector<Stage> depends;
  // Upstream files: work-dir relative paths with their producer.
  std::vector<std::pair<std::string, Stage>> artifacts;
  std::vector<std::string> external;  // absolute paths outside the work dir
};

json section(const PipelineConfig& c, const char* name) { return config_to_json(c)[name]; }

json layers_json(const PipelineConfig& c) { return json(c.resolved_layers()); }

StagePlan plan_for(Stage stage, const PipelineConfig& c) {
  StagePlan p;
  const auto layers = c.resolved_layers();
  switch (stage) {
    case Stage::kPrepare: {
      p.config = {{"corpus", section(c, "corpus")}};
      p.external = {c.paths.manifest, c.paths.vocab_json, c.paths.merges};
      for (const auto& e : load_manifest(c.paths.manifest)) p.external.push_back(c.paths.corpus_dir + "/" + e.filename);
      break;
    }
    case Stage::kTrainLm:
      p.config = {{"gpt", section(c, "gpt")}, {"train", section(c, "train")}, {"seed", c.seed}};
      p.depends = {Stage::kPrepare};
      p.artifacts = {{"prepare/train.bin", Stage::kPrepare}, {"prepare/val.bin", Stage::kPrepare}};
      p.external = {c.paths.vocab_json};
      break;
    case Stage::kEvalLm:
      p.config = json::object();
      p.depends = {Stage::kTrainLm, Stage::kPrepare};
      p.artifacts = {{"lm/best.ckpt", Stage::kTrainLm},
                     {"prepare/val.bin", Stage::kPrepare},
                     {"prepare/eval.bin", Stage::kPrepare}};
      break;
    case Stage::kExtract:
      p.config = {{"layers", layers_json(c)}};
      p.depends = {Stage::kTrainLm, Stage::kPrepare};
      p.artifacts = {{"lm/best.ckpt", Stage::kTrainLm}, {"prepare/sentences.jsonl", Stage::kPrepare}};
      p.external = {c.paths.vocab_json, c.paths.merges};
      break;
    case Stage::kTrainSae: {
      json per_layer = json::object();
      for (auto l : layers) {
        const SaeConfig s = c.sae_config(l);
        per_layer[std::to_string(l)] = {{"hidden_dim", s.resolved_hidden_dim()}, {"k", s.k},
                                        {"max_epochs", s.max_epochs}, {"patience", s.patience},
                                        {"lr", s.lr}, {"batch_size", s.batch_size},
                                        {"center", s.center}, {"seed", s.seed}};
      }
      p.config = {{"layers", per_layer}, {"train_ratio", c.sae.train_ratio}, {"split_seed", c.split_seed()}};
      p.depends = {Stage::kExtract};
      for (auto l : layers) p.artifacts.emplace_back(layer_file("activations", l, ".bin"), Stage::kExtract);
      break;
    }
    case Stage::kEvalSae:
      p.config = {{"layers", layers_json(c)}, {"train_ratio", c.sae.train_ratio}, {"split_seed", c.split_seed()}};
      p.depends = {Stage::kTrainSae, Stage::kExtract};
      for (auto l : layers) {
        p.artifacts.emplace_back(layer_file("sae", l, ".sae"), Stage::kTrainSae);
        p.artifacts.emplace_back(layer_file("activations", l, ".bin"), Stage::kExtract);
      }
      break;
    case Stage::kAudit: {
      json t = section(c, "audit");
      t.erase("top_n");
      p.config = {{"layers", layers_json(c)}, {"thresholds", t}};
      p.depends = {Stage::kTrainSae, Stage::kTrainLm};
      for (auto l : layers) p.artifacts.emplace_back(layer_file("sae", l, ".sae"), Stage::kTrainSae);
      p.artifacts.emplace_back("lm/best.ckpt", Stage::kTrainLm);
      p.external = {c.paths.probes, c.paths.vocab_json, c.paths.merges};
      break;
    }
    case Stage::kReport:
      p.config = {{"top_n", c.top_n}};
      p.depends = {Stage::kAudit};
      p.artifacts = {{"audit/catalog.jsonl", Stage::kAudit}, {"audit/layers.json", Stage::kAudit}};
      break;
    case Stage::kGenerate:
      p.config = {{"generate", section(c, "generate")}, {"seed", c.seed}};
      p.depends = {Stage::kTrainLm};
      p.artifacts = {{"lm/best.ckpt", Stage::kTrainLm}};
      p.external = {c.paths.vocab_json, c.paths.merges};
      break;
  }
  return p;
}

void check_upstream(Stage stage, const StagePlan& plan, const std::string& work) {
  for (Stage d : plan.depends) {
    const std::string m = std::string(stage_dir(d)) + "/manifest.json";
    if (!fs::exists(work + "/" + m)) {
      throw MissingArtifactError(std::string(stage_name(stage)) + " needs " + m + " in " + work + "; run stage '" +
                                     std::string(stage_name(d)) + "' first",
                                 d);
    }
  }
  for (const auto& [rel, producer] : plan.artifacts) {
    if (!fs::exists(work + "/" + rel)) {
      throw MissingArtifactError(std::string(stage_name(stage)) + " needs " + rel + " in " + work + "; run stage '" +
                                     std::string(stage_name(producer)) + "' first",
                                 producer);
    }
  }
}

json pairs_json(const std::vector<std::pair<std::string, std::string>>& v) {
  json out = json::object();
  for (const auto& [k, h] : v) out[k] = h;
  return out;
}

std::vector<std::pair<std::string, std::string>> pairs_from(const json& j) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, v] : j.items()) out.emplace_back(k, v.get<std::string>());
  return out;
}

void write_stage_manifest(const std::string& path, const StageManifest& m) {
  const json j{{"stage", m.stage},
               {"version", m.version},
               {"config_hash", m.config_hash},
               {"config", m.config},
               {"inputs", pairs_json(m.inputs)},
               {"outputs", pairs_json(m.outputs)}};
  write_file_text(path, j.dump(2) + "\n");
}

BpeVocab load_vocab(const PipelineConfig& c) { return BpeVocab::load(c.paths.vocab_json, c.paths.merges); }

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---- stage bodies; each returns its outputs relative to the work dir ----

std::vector<std::string> do_prepare(const StageContext& s) {
  const auto& c = s.config;
  std::vector<std::string> warnings;
  const auto manifest = load_manifest(c.paths.manifest);
  const auto docs = load_corpus(c.paths.corpus_dir, manifest, &warnings);
  for (const auto& w : warnings) s.log.warn(s.name, "clean", {{"message", w}});
  const BpeVocab vocab = load_vocab(c);

  std::vector<Document> train_docs, eval_docs;
  for (const auto& d : docs) (d.role == SplitRole::kTrain ? train_docs : eval_docs).push_back(d);
  const TokenStreams streams = build_token_stream(train_docs, vocab, c.corpus.train_ratio);
  const auto held_out = concat_documents(eval_docs, vocab);

  const SentenceBand band{c.corpus.min_words, c.corpus.max_words};
  std::vector<SentenceRecord> sentences;
  for (const auto& d : train_docs) {
    auto recs = split_sentences(d, band);
    sentences.insert(sentences.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
  }
  const auto admitted =
      static_cast<std::size_t>(std::count_if(sentences.begin(), sentences.end(), [](const auto& r) { return r.admitted; }));

  write_token_stream(s.abs("prepare/train.bin"), streams.train);
  write_token_stream(s.abs("prepare/val.bin"), streams.validation);
  write_token_stream(s.abs("prepare/eval.bin"), held_out);
  write_sentences(s.abs("prepare/sentences.jsonl"), sentences);
  const json report{{"documents", docs.size()},
                    {"train_documents", streams.train_documents},
                    {"validation_documents", streams.validation_documents},
                    {"eval_documents", eval_docs.size()},
                    {"train_tokens", streams.train.size()},
                    {"validation_tokens", streams.validation.size()},
                    {"eval_tokens", held_out.size()},
                    {"sentences", sentences.size()},
                    {"admitted_sentences", admitted},
                    {"warnings", warnings}};
  write_file_text(s.abs("prepare/report.json"), report.dump(2) + "\n");
  s.log.info(s.name, "corpus", report);
  s.log.say("  " + std::to_string(docs.size()) + " documents, " + std::to_string(streams.train.size()) +
            " train / " + std::to_string(streams.validation.size()) + " validation tokens, " +
            std::to_string(admitted) + " admitted sentences");
  return {"prepare/train.bin", "prepare/val.bin", "prepare/eval.bin", "prepare/sentences.jsonl",
          "prepare/report.json"};
}

std::vector<std::string> do_train_lm(const StageContext& s) {
  const auto& c = s.config;
  GptConfig gc = c.gpt;
  gc.vocab_size = load_vocab(c).size();
  GptModel model(gc);
  const auto train = read_token_stream(s.abs("prepare/train.bin"));
  const auto val = read_token_stream(s.abs("prepare/val.bin"));
  TrainRunConfig tc = c.train;
  tc.checkpoint_dir = s.abs("lm");
  s.log.info(s.name, "model", {{"parameters", model.parameter_count()}, {"vocab_size", gc.vocab_size}});
  auto result = train_lm(model, train, val, tc, [&](const TrainLogRecord& r) {
    json f{{"step", r.step}, {"train_loss", r.train_loss}, {"wall_ms", r.wall_ms}};
    f["val_loss"] = r.val_loss ? json(*r.val_loss) : json(nullptr);
    s.log.info(s.name, "step", f);
  });
  // Wall time lives in the run log; the artifact stays reproducible.
  for (auto& r : result.log) r.wall_ms = 0.0;
  write_train_log(s.abs("lm/train_log.jsonl"), result.log);
  if (result.best_val_loss) {
    s.log.say("  best validation loss " + fixed(*result.best_val_loss, 4) + " at step " +
              std::to_string(result.best_step));
  }
  return {"lm/best.ckpt", "lm/last.ckpt", "lm/train_log.jsonl"};
}

std::vector<std::string> do_eval_lm(const StageContext& s) {
  const GptModel model = load_model(s.abs("lm/best.ckpt"));
  json out = json::object();
  const std::pair<const char*, const char*> streams[] = {{"validation", "prepare/val.bin"},
                                                         {"held_out", "prepare/eval.bin"}};
  for (const auto& [name, file] : streams) {
    const auto ids = read_token_stream(s.abs(file));
    if (ids.size() < 2) {
      out[name] = nullptr;
      continue;
    }
    const double nll = mean_nll(model, ids);
    out[name] = {{"tokens", ids.size()}, {"mean_nll", nll}, {"perplexity", std::exp(nll)}};
    s.log.say(std::string("  ") + name + " perplexity " + fixed(std::exp(nll), 2));
  }
  write_file_text(s.abs("lm_eval/eval.json"), out.dump(2) + "\n");
  s.log.info(s.name, "perplexity", out);
  return {"lm_eval/eval.json"};
}

std::vector<std::string> do_extract(const StageContext& s) {
  const auto& c = s.config;
  const GptModel model = load_model(s.abs("lm/best.ckpt"));
  const BpeVocab vocab = load_vocab(c);
  const auto records = read_sentences(s.abs("prepare/sentences.jsonl"));
  const auto items = sentence_items(records);
  auto result = extract_activations(model, items, vocab);
  for (const auto& w : result.warnings) s.log.warn(s.name, "skip", {{"message", w}});
  std::vector<ActivationFileEntry> entries;
  std::vector<std::string> outputs;
  for (std::uint32_t l : c.resolved_layers()) {
    const ActivationSet& set = result.layers.at(l - 1);
    const std::string rel = layer_file("activations", l, ".bin");
    write_activation_file(set, s.abs(rel));
    entries.push_back({l, fs::path(rel).filename().string(), set.rows(), set.dim, sha256_file(s.abs(rel))});
    outputs.push_back(rel);
  }
  write_activation_manifest(s.abs("activations/index.json"), entries);
  outputs.push_back("activations/index.json");
  s.log.info(s.name, "rows", {{"items", items.size()}, {"skipped", result.skipped},
                              {"rows", entries.empty() ? 0 : entries.front().rows}});
  s.log.say("  " + std::to_string(items.size()) + " sentences, " +
            std::to_string(entries.empty() ? 0 : entries.front().rows) + " token rows per layer");
  return outputs;
}

json metrics_json(const SaeMetrics& m) {
  return {{"mse", m.mse}, {"cosine", m.cosine}, {"rows", m.rows}, {"zero_norm_rows", m.zero_norm_rows}};
}

std::vector<std::string> do_train_sae(const StageContext& s) {
  const auto& c = s.config;
  const auto layers = c.resolved_layers();
  std::vector<SaeTrainResult> results(layers.size());
  std::vector<std::string> failures(layers.size());

  // Layers are independent; a failure is reported after the loop.
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < layers.size(); ++i) {
    try {
      const auto set = read_activation_file(s.abs(layer_file("activations", layers[i], ".bin")));
      const auto [train, val] = split_activation_set(set, c.sae.train_ratio, c.split_seed());
      results[i] = train_sae(c.sae_config(layers[i]), train, val);
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!failures[i].empty()) throw Error("layer " + std::to_string(layers[i]) + ": " + failures[i]);
  }

  std::vector<std::string> outputs;
  json summary = json::array();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& r = results[i];
    const std::string model_rel = layer_file("sae", layers[i], ".sae");
    const std::string log_rel = layer_file("sae", layers[i], ".log.jsonl");
    save_sae(r.model, s.abs(model_rel));
    std::ostringstream lines;
    for (const auto& e : r.log) {
      lines << json{{"epoch", e.epoch}, {"train_mse", e.train_mse}, {"val_mse", e.val_mse}, {"improved", e.improved}}
                   .dump()
            << '\n';
    }
    write_file_text(s.abs(log_rel), lines.str());
    const json row{{"layer", layers[i]},
                   {"hidden_dim", r.model.config.resolved_hidden_dim()},
                   {"k", r.model.config.k},
                   {"epochs", r.log.size()},
                   {"best_epoch", r.best_epoch},
                   {"best_val_mse", r.best_val_mse},
                   {"stopped_early", r.stopped_early}};
    summary.push_back(row);
    s.log.info(s.name, "layer", row);
    s.log.say("  layer " + std::to_string(layers[i]) + ": best val MSE " + fixed(r.best_val_mse, 6) + " at epoch " +
              std::to_string(r.best_epoch));
    outputs.push_back(model_rel);
    outputs.push_back(log_rel);
  }
  write_file_text(s.abs("sae/summary.json"), summary.dump(2) + "\n");
  outputs.push_back("sae/summary.json");
  return outputs;
}

std::vector<std::string> do_eval_sae(const StageContext& s) {
  const auto& c = s.config;
  json rows = json::array();
  for (std::uint32_t l : c.resolved_layers()) {
    const SaeModel model = load_sae(s.abs(layer_file("sae", l, ".sae")));
    const auto set = read_activation_file(s.abs(layer_file("activations", l, ".bin")));
    const auto [train, val] = split_activation_set(set, c.sae.train_ratio, c.split_seed());
    const SaeMetrics tm = evaluate_sae(model, train);
    const SaeMetrics vm = evaluate_sae(model, val);
    const json row{{"layer", l}, {"train", metrics_json(tm)}, {"validation", metrics_json(vm)}};
    rows.push_back(row);
    s.log.info(s.name, "layer", row);
    s.log.say("  layer " + std::to_string(l) + ": val MSE " + fixed(vm.mse, 6) + ", cosine " + fixed(vm.cosine, 4));
  }
  write_file_text(s.abs("sae_eval/eval.json"), rows.dump(2) + "\n");
  return {"sae_eval/eval.json"};
}

std::vector<std::string> do_audit(const StageContext& s) {
  const auto& c = s.config;
  const GptModel model = load_model(s.abs("lm/best.ckpt"));
  const BpeVocab vocab = load_vocab(c);
  const auto prompts = load_probe_dataset(c.paths.probes);
  const auto layers = c.resolved_layers();
  std::vector<SaeModel> saes;
  for (auto l : layers) saes.push_back(load_sae(s.abs(layer_file("sae", l, ".sae"))));

  const ProfileResult profile = profile_neurons(model, saes, prompts, vocab);
  for (const auto& w : profile.warnings) s.log.warn(s.name, "skip", {{"message", w}});

  std::ostringstream catalog;
  json per_layer = json::array();
  std::size_t total = 0;
  for (const auto& lp : profile.layers) {
    const LayerAudit a = audit_layer(lp, prompts, c.audit);
    for (const auto& x : a.assignments) catalog << assignment_to_json_line(x) << '\n';
    total += a.assignments.size();
    const json row{{"layer", a.layer}, {"prompts", a.prompts}, {"retained", a.retained},
                   {"stats", a.stats.size()}, {"assignments", a.assignments.size()}};
    per_layer.push_back(row);
    s.log.info(s.name, "layer", row);
    s.log.say("  layer " + std::to_string(a.layer) + ": " + std::to_string(a.retained) + " selective latents, " +
              std::to_string(a.assignments.size()) + " assigned");
  }
  write_file_text(s.abs("audit/catalog.jsonl"), catalog.str());
  write_file_text(s.abs("audit/layers.json"),
                  json{{"skipped_prompts", profile.skipped}, {"layers", per_layer}}.dump(2) + "\n");
  s.log.info(s.name, "catalog", {{"assignments", total}});
  return {"audit/catalog.jsonl", "audit/layers.json"};
}

std::string markdown_report(const std::vector<LayerSummary>& layers, const std::vector<ConceptSummary>& concepts,
                            const std::vector<NeuronAssignment>& top, const std::vector<ConceptGraph>& graphs) {
  auto opt = [](const std::optional<double>& v) { return v ? fixed(*v, 2) : std::string("-"); };
  std::ostringstream md;
  md << "# Concept audit\n\n## Layers\n\n| layer | selective | growth | mean AP | mean polarity |\n"
     << "|---|---|---|---|---|\n";
  for (const auto& l : layers) {
    md << "| " << l.layer << " | " << l.selective << " | " << l.growth << " | " << opt(l.mean_primary_ap) << " | "
       << opt(l.mean_polarity) << " |\n";
  }
  md << "\n## Concepts\n\n| concept | neurons | mean AP | mean polarity | no secondary |\n|---|---|---|---|---|\n";
  for (const auto& r : concepts) {
    md << "| " << concept_name(r.topic) << " | " << r.count << " | " << opt(r.mean_primary_ap) << " | "
       << opt(r.mean_polarity) << " | " << r.no_secondary << " |\n";
  }
  md << "\n## Top detectors\n\n| layer | neuron | primary | AP | secondary | polarity | category |\n"
     << "|---|---|---|---|---|---|---|\n";
  for (const auto& a : top) {
    md << "| " << a.layer << " | " << a.neuron << " | " << concept_name(a.primary) << " | " << fixed(a.primary_ap, 2)
       << " | " << (a.secondary ? std::string(concept_name(*a.secondary)) : std::string("-")) << " | "
       << fixed(a.polarity, 2) << " | " << dominance_name(a.category) << " |\n";
  }
  md << "\n## Dual-theme pairs\n";
  for (const auto& g : graphs) {
    md << "\nLayer " << g.layer << ": ";
    if (g.edges.empty()) {
      md << "none\n";
      continue;
    }
    for (std::size_t i = 0; i < g.edges.size(); ++i) {
      const auto& e = g.edges[i];
      md << (i ? ", " : "") << concept_name(e.a) << "-" << concept_name(e.b) << " (" << e.count << ")";
    }
    md << "\n";
  }
  return md.str();
}

std::vector<std::string> do_report(const StageContext& s) {
  std::vector<NeuronAssignment> assignments;
  std::istringstream in(read_file_text(s.abs("audit/catalog.jsonl")));
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) assignments.push_back(assignment_from_json_line(line));
  }
  const json audited = json::parse(read_file_text(s.abs("audit/layers.json")));
  std::vector<std::uint32_t> layers;
  for (const auto& row : audited.at("layers")) layers.push_back(row.at("layer").get<std::uint32_t>());
  std::sort(layers.begin(), layers.end());

  const auto layer_rows = layer_summaries(assignments, layers);
  const auto concept_rows = concept_summaries(assignments);
  const auto top = top_detectors(assignments, s.config.top_n);
  write_file_text(s.abs("report/layer_summary.json"), layer_summaries_json(layer_rows));
  write_file_text(s.abs("report/concept_summary.json"), concept_summaries_json(concept_rows));
  write_file_text(s.abs("report/top_detectors.json"), top_detectors_json(top));
  std::vector<std::string> outputs{"report/layer_summary.json", "report/concept_summary.json",
                                   "report/top_detectors.json"};

  fs::create_directories(s.abs("report/graphs"));
  std::vector<ConceptGraph> graphs;
  for (auto l : layers) {
    graphs.push_back(build_concept_graph(assignments, l));
    const std::string dot = layer_file("report/graphs", l, ".dot");
    const std::string js = layer_file("report/graphs", l, ".json");
    write_file_text(s.abs(dot), graph_to_dot(graphs.back()));
    write_file_text(s.abs(js), graph_to_json(graphs.back()));
    outputs.push_back(dot);
    outputs.push_back(js);
  }
  write_file_text(s.abs("report/report.md"), markdown_report(layer_rows, concept_rows, top, graphs));
  outputs.push_back("report/report.md");
  s.log.info(s.name, "tables", {{"assignments", assignments.size()}, {"layers", layers.size()}, {"top", top.size()}});
  s.log.say("  " + std::to_string(assignments.size()) + " assignments over " + std::to_string(layers.size()) +
            " layers; report at " + s.abs("report/report.md"));
  return outputs;
}

std::vector<std::string> do_generate(const StageContext& s) {
  const auto& c = s.config;
  const GptModel model = load_model(s.abs("lm/best.ckpt"));
  const BpeVocab vocab = load_vocab(c);
  auto prompt = encode(c.generate.prompt, vocab);
  const std::size_t ctx = model.config().context_length;
  if (prompt.size() >= ctx) {
    prompt.erase(prompt.begin(), prompt.end() - static_cast<std::ptrdiff_t>(ctx - 1));
    s.log.warn(s.name, "prompt", {{"message", "prompt truncated to its last " + std::to_string(ctx - 1) + " tokens"}});
  }
  std::size_t max_new = c.generate.max_new;
  if (prompt.size() + max_new > ctx) {
    max_new = ctx - prompt.size();
    s.log.warn(s.name, "length", {{"message", "max_new reduced to " + std::to_string(max_new) + " to fit the context"}});
  }
  const auto ids = generate(model, prompt, max_new, c.generate.temperature, c.seed);
  const std::string text = decode(ids, vocab);
  write_file_text(s.abs("generate/sample.txt"), text + "\n");
  s.log.say("  " + text);
  return {"generate/sample.txt"};
}

std::vector<std::string> run_body(Stage stage, const StageContext& s) {
  switch (stage) {
    case Stage::kPrepare: return do_prepare(s);
    case Stage::kTrainLm: return do_train_lm(s);
    case Stage::kEvalLm: return do_eval_lm(s);
    case Stage::kExtract: return do_extract(s);
    case Stage::kTrainSae: return do_train_sae(s);
    case Stage::kEvalSae: return do_eval_sae(s);
    case Stage::kAudit: return do_audit(s);
    case Stage::kReport: return do_report(s);
    case Stage::kGenerate: return do_generate(s);
  }
  throw Error("unknown stage");
}

bool up_to_date(const std::string& manifest_path, const StageManifest& want, const std::string& work) {
  if (!fs::exists(manifest_path)) return false;
  StageManifest have;
  try {
    have = read_stage_manifest(manifest_path);
  } catch (const std::exception&) {
    return false;
  }
  if (have.stage != want.stage || have.version != want.version || have.config_hash != want.config_hash ||
      have.inputs != want.inputs) {
    return false;
  }
  for (const auto& [rel, hash] : have.outputs) {
    const std::string p = work + "/" + rel;
    if (!fs::exists(p) || sha256_file(p) != hash) return false;
  }
  return true;
}

}  // namespace

std::string_view stage_name(Stage s) {
  for (const auto& [k, v] : kStageNames) {
    if (k == s) return v;
  }
  return "?";
}

std::optional<Stage> parse_stage(std::string_view name) {
  for (const auto& [k, v] : kStageNames) {
    if (v == name) return k;
  }
  return std::nullopt;
}

std::vector<Stage> all_stages() {
  std::vector<Stage> out;
  for (const auto& [k, v] : kStageNames) out.push_back(k);
  return out;
}

std::string_view stage_dir(Stage s) {
  switch (s) {
    case Stage::kPrepare: return "prepare";
    case Stage::kTrainLm: return "lm";
    case Stage::kEvalLm: return "lm_eval";
    case Stage::kExtract: return "activations";
    case Stage::kTrainSae: return "sae";
    case Stage::kEvalSae: return "sae_eval";
    case Stage::kAudit: return "audit";
    case Stage::kReport: return "report";
    case Stage::kGenerate: return "generate";
  }
  return "";
}

RunLog::RunLog(const std::string& path, bool echo) : echo_(echo) {
  if (!path.empty()) {
    fs::create_directories(fs::path(path).parent_path());
    out_.open(path, std::ios::app);
    if (!out_) throw InputError("cannot open log file " + path);
  }
}

void RunLog::write(std::string_view level, std::string_view stage, std::string_view event, json fields) {
  json rec{{"level", level}, {"stage", stage}, {"event", event}};
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  rec["time_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
  for (auto& [k, v] : fields.items()) rec[k] = v;
  if (out_.is_open()) out_ << rec.dump() << '\n' << std::flush;
}

void RunLog::info(std::string_view stage, std::string_view event, json fields) {
  write("info", stage, event, std::move(fields));
}

void RunLog::warn(std::string_view stage, std::string_view event, json fields) {
  write("warn", stage, event, std::move(fields));
}

void RunLog::error(std::string_view stage, std::string_view event, json fields) {
  ++errors_;
  if (echo_ && fields.contains("message")) {
    std::cerr << "error [" << stage << "]: " << fields["message"].get<std::string>() << '\n';
  }
  write("error", stage, event, std::move(fields));
}

void RunLog::say(const std::string& line) {
  if (echo_) std::cout << line << '\n' << std::flush;
}

WorkDirLock::WorkDirLock(const std::string& work_dir) : path_(work_dir + "/.lock") {
  fs::create_directories(work_dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw LockError("work dir " + work_dir + " is locked by another run (delete " + path_ + " if it is stale)");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

WorkDirLock::~WorkDirLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

StageManifest read_stage_manifest(const std::string& path) {
  const json j = json::parse(read_file_text(path));
  StageManifest m;
  m.stage = j.at("stage").get<std::string>();
  m.version = j.at("version").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.config = j.at("config");
  m.inputs = pairs_from(j.at("inputs"));
  m.outputs = pairs_from(j.at("outputs"));
  return m;
}

StageOutcome run_stage(Stage stage, const PipelineConfig& config, RunLog& log, bool force) {
  const std::string work = config.paths.work_dir;
  const std::string name(stage_name(stage));
  const StagePlan plan = plan_for(stage, config);
  check_upstream(stage, plan, work);

  StageManifest m;
  m.stage = name;
  m.version = std::string(kPipelineVersion);
  m.config = plan.config;
  m.config_hash = sha256_hex(plan.config.dump());
  for (const auto& [rel, producer] : plan.artifacts) m.inputs.emplace_back(rel, sha256_file(work + "/" + rel));
  for (const auto& p : plan.external) {
    if (!fs::exists(p)) throw InputError(name + " needs " + p + ", which does not exist");
    m.inputs.emplace_back(p, sha256_file(p));
  }
  std::sort(m.inputs.begin(), m.inputs.end());

  const std::string dir = work + "/" + std::string(stage_dir(stage));
  const std::string manifest_path = dir + "/manifest.json";
  if (!force && up_to_date(manifest_path, m, work)) {
    log.info(name, "skipped", {{"reason", "inputs and config unchanged"}});
    log.say(name + ": up to date");
    return StageOutcome::kSkipped;
  }

  log.say(name + ": running");
  const auto start = std::chrono::steady_clock::now();
  fs::remove_all(dir);
  fs::create_directories(dir);
  const StageContext ctx{config, log, work, name};
  const auto outputs = run_body(stage, ctx);
  for (const auto& rel : outputs) m.outputs.emplace_back(rel, sha256_file(work + "/" + rel));
  std::sort(m.outputs.begin(), m.outputs.end());
  write_stage_manifest(manifest_path, m);
  const double ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  log.info(name, "done", {{"outputs", outputs.size()}, {"elapsed_ms", ms}});
  log.say(name + ": done in " + fixed(ms / 1000.0, 1) + " s");
  return StageOutcome::kRan;
}

int run_pipeline(const PipelineConfig& config, const RunOptions& options) {
  const std::string work = config.paths.work_dir;
  fs::create_directories(work);
  RunLog log(work + "/logs/run.jsonl", options.echo);
  try {
    WorkDirLock lock(work);
    const auto stages = options.stages.empty() ? all_stages() : options.stages;
    log.info("pipeline", "start", {{"stages", [&] {
                                      json a = json::array();
                                      for (Stage s : stages) a.push_back(stage_name(s));
                                      return a;
                                    }()},
                                   {"seed", config.seed},
                                   {"force", options.force}});
    for (Stage s : stages) {
      try {
        run_stage(s, config, log, options.force);
      } catch (const MissingArtifactError& e) {
        log.error(stage_name(s), "missing-artifact", {{"message", e.what()}, {"producer", stage_name(e.producer())}});
        break;
      } catch (const std::exception& e) {
        log.error(stage_name(s), "failed", {{"message", e.what()}});
        break;
      }
    }
  } catch (const std::exception& e) {
    log.error("pipeline", "failed", {{"message", e.what()}});
  }
  log.info("pipeline", "end", {{"errors", log.errors()}});
  return log.errors() == 0 ? 0 : 1;
}

}  // namespace cprobe
