#pragma once

// Maps SAE latents onto the probing concepts: firing profiles over labeled
// prompts, selectivity filtering, per (neuron, concept) metrics, primary and
// secondary assignment, aggregation and dual-theme graphs.

#include <array>
#include <bitset>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cprobe/gpt/gpt.h"
#include "cprobe/sae/sae.h"
#include "cprobe/tokenizer/bpe.h"

namespace cprobe {

enum class Concept : std::uint8_t {
  kFemale,
  kMale,
  kFamily,
  kMarriage,
  kWealth,
  kEmotion,
  kLove,
  kScandal,
  kDuty,
  kClass,
  kSociety,
};
inline constexpr std::size_t kConceptCount = 11;

std::string_view concept_name(Concept c);
std::optional<Concept> parse_concept(std::string_view name);
// All concepts in declaration order.
std::array<Concept, kConceptCount> all_concepts();

using LabelSet = std::bitset<kConceptCount>;

struct ProbePrompt {
  std::string id;
  std::string text;
  LabelSet labels;
};

// Line-delimited JSON {"id", "text", "labels": [...]}. Blank lines are
// ignored; a missing id defaults to "p<line>". Unknown concepts, empty label
// lists, empty text and duplicate ids raise ValidationError with the line.
std::vector<ProbePrompt> parse_probe_dataset(std::string_view text, const std::string& source = "<memory>");
std::vector<ProbePrompt> load_probe_dataset(const std::string& path);

struct AuditThresholds {
  double fire = 5.0;  // a neuron fires on a prompt when its score is strictly above this
  std::size_t min_prompts = 5;
  std::size_t max_prompts = 150;
  double secondary_floor = 1.5;  // secondary kept iff AP > floor × positive rate
  double dominant_above = 0.5;
  double leaning_at_most = 0.2;

  void validate() const;
};

// Per-prompt scores of every latent of one layer's SAE: the max over the
// prompt's token positions. Rows follow `prompts`.
struct LayerProfile {
  std::uint32_t layer = 0;
  std::size_t hidden = 0;
  std::vector<std::size_t> prompts;  // indices into the probe dataset
  std::vector<float> scores;         // prompts.size() × hidden

  float score(std::size_t row, std::size_t neuron) const { return scores[row * hidden + neuron]; }
  bool fired(std::size_t row, std::size_t neuron, double theta) const { return score(row, neuron) > theta; }
  std::size_t fire_count(std::size_t neuron, double theta) const;
};

struct ProfileResult {
  std::vector<LayerProfile> layers;  // one per SAE, in the order given
  std::vector<std::string> warnings;
  std::size_t skipped = 0;
};

// Eval-mode forward of each prompt; every layer with an SAE encodes the
// prompt's token rows and keeps the per-latent max. Prompts longer than the
// context are skipped with a warning.
ProfileResult profile_neurons(const GptModel& model, std::span<const SaeModel> saes,
                              std::span<const ProbePrompt> prompts, const BpeVocab& vocab);

// Latents whose fire count lies in [min_prompts, max_prompts], ascending.
std::vector<std::uint32_t> selectivity_filter(const LayerProfile& profile, const AuditThresholds& t);

// Prompts sorted by score descending (ties toward the lower index); the
// mean of precision@rank over positive ranks. Throws UndefinedMetricError
// without positives, DimensionError on length mismatch.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct NeuronConceptStat {
  std::uint32_t layer = 0;
  std::uint32_t neuron = 0;
  Concept topic = Concept::kFemale;
  double ap = 0.0;
  double p_fire_given_1 = 0.0;
  double p_fire_given_0 = 0.0;
  double delta_p = 0.0;
};

// Stats of `concept` for each listed neuron, keeping only ΔP > 0. Throws
// ConfigError when the profiled prompts hold no positives or no negatives.
std::vector<NeuronConceptStat> concept_stats(const LayerProfile& profile, std::span<const ProbePrompt> prompts,
                                             Concept topic, std::span<const std::uint32_t> neurons,
                                             const AuditThresholds& t);

enum class Dominance : std::uint8_t { kDominant, kTwoStrong, kLeaning };
std::string_view dominance_name(Dominance d);

struct NeuronAssignment {
  std::uint32_t layer = 0;
  std::uint32_t neuron = 0;
  Concept primary = Concept::kFemale;
  double primary_ap = 0.0;
  std::optional<Concept> secondary;
  double secondary_ap = 0.0;  // 0 when there is no secondary
  double polarity = 0.0;
  Dominance category = Dominance::kLeaning;

  bool operator==(const NeuronAssignment&) const = default;
};

// (AP_p − AP_s) / (AP_p + 1e-9).
double polarity(double primary_ap, double secondary_ap);
Dominance dominance(double polarity, const AuditThresholds& t);

// Positive rate of each concept among the profiled prompts.
std::array<double, kConceptCount> positive_rates(std::span<const ProbePrompt> prompts,
                                                 std::span<const std::size_t> rows);

// Groups stats by (layer, neuron) and assigns primary/secondary concepts.
// Output is sorted by (layer, neuron).
std::vector<NeuronAssignment> assign_concepts(std::span<const NeuronConceptStat> stats,
                                              const std::array<double, kConceptCount>& positive_rate,
                                              const AuditThresholds& t);

struct LayerAudit {
  std::uint32_t layer = 0;
  std::size_t prompts = 0;
  std::size_t retained = 0;  // neurons passing the selectivity filter
  std::vector<NeuronConceptStat> stats;
  std::vector<NeuronAssignment> assignments;
};

// Filter, per-concept stats and assignment for one profiled layer.
LayerAudit audit_layer(const LayerProfile& profile, std::span<const ProbePrompt> prompts, const AuditThresholds& t);

struct LayerSummary {
  std::uint32_t layer = 0;
  std::size_t selective = 0;
  std::int64_t growth = 0;
  std::optional<double> mean_primary_ap;
  std::optional<double> mean_polarity;
  bool operator==(const LayerSummary&) const = default;
};

// One record per entry of `layers` (ascending); growth is relative to the
// previous entry and 0 for the first.
std::vector<LayerSummary> layer_summaries(std::span<const NeuronAssignment> assignments,
                                          std::span<const std::uint32_t> layers);

struct ConceptSummary {
  Concept topic = Concept::kFemale;
  std::size_t count = 0;
  std::optional<double> mean_primary_ap;
  std::optional<double> mean_polarity;
  std::size_t no_secondary = 0;
  bool operator==(const ConceptSummary&) const = default;
};

// All 11 concepts in declaration order, keyed by primary concept.
std::vector<ConceptSummary> concept_summaries(std::span<const NeuronAssignment> assignments);

struct ConceptEdge {
  Concept a = Concept::kFemale;  // a < b in declaration order
  Concept b = Concept::kFemale;
  std::size_t count = 0;
  double width = 0.0;  // count / max count in the layer
  bool operator==(const ConceptEdge&) const = default;
};

struct ConceptGraph {
  std::uint32_t layer = 0;
  std::vector<ConceptEdge> edges;  // sorted by (a, b)
  bool operator==(const ConceptGraph&) const = default;
};

ConceptGraph build_concept_graph(std::span<const NeuronAssignment> assignments, std::uint32_t layer);

// Undirected DOT with one node per concept; edges carry weight=count and
// penwidth scaled from width.
std::string graph_to_dot(const ConceptGraph& g);
// Reads the subset of DOT written by graph_to_dot. Throws InputError.
ConceptGraph graph_from_dot(std::string_view dot);
std::string graph_to_json(const ConceptGraph& g);
ConceptGraph graph_from_json(std::string_view json);

// Highest primary AP first (ties: polarity desc, layer asc, neuron asc).
std::vector<NeuronAssignment> top_detectors(std::span<const NeuronAssignment> assignments, std::size_t limit);

std::string assignment_to_json_line(const NeuronAssignment& a);
NeuronAssignment assignment_from_json_line(std::string_view line);
std::string layer_summaries_json(std::span<const LayerSummary> rows);
std::string concept_summaries_json(std::span<const ConceptSummary> rows);
std::string top_detectors_json(std::span<const NeuronAssignment> rows);

}  // namespace cprobe
