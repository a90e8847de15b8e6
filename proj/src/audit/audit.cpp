#include "cprobe/audit/audit.h"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cprobe/activations/activations.h"
#include "cprobe/core/binary_io.h"
#include "cprobe/core/errors.h"

namespace cprobe {

namespace {

constexpr std::array<std::string_view, kConceptCount> kConceptNames = {
    "female", "male", "family", "marriage", "wealth", "emotion", "love", "scandal", "duty", "class", "society"};

constexpr double kPolarityEps = 1e-9;
// Score rows encoded per SAE call; bounds the dense latent buffer.
constexpr std::size_t kEncodeRows = 512;

Concept concept_from_json(const nlohmann::json& j) {
  const auto c = parse_concept(j.get<std::string>());
  if (!c) throw InputError("unknown concept \"" + j.get<std::string>() + "\"");
  return *c;
}

template <typename Fn>
std::optional<double> mean_of(std::span<const NeuronAssignment> rows, Fn fn) {
  if (rows.empty()) return std::nullopt;
  double s = 0;
  for (const auto& r : rows) s += fn(r);
  return s / static_cast<double>(rows.size());
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

}  // namespace

std::string_view concept_name(Concept c) { return kConceptNames.at(static_cast<std::size_t>(c)); }

std::optional<Concept> parse_concept(std::string_view name) {
  for (std::size_t i = 0; i < kConceptCount; ++i) {
    if (kConceptNames[i] == name) return static_cast<Concept>(i);
  }
  return std::nullopt;
}

std::array<Concept, kConceptCount> all_concepts() {
  std::array<Concept, kConceptCount> out{};
  for (std::size_t i = 0; i < kConceptCount; ++i) out[i] = static_cast<Concept>(i);
  return out;
}

std::vector<ProbePrompt> parse_probe_dataset(std::string_view text, const std::string& source) {
  std::vector<ProbePrompt> out;
  std::set<std::string> ids;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = std::min(text.find('\n', pos), text.size());
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      if (end == text.size()) break;
      continue;
    }
    const auto fail = [&](const std::string& what) { throw ValidationError(source + ": " + what, line_no); };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) fail("record is not an object");
    ProbePrompt p;
    if (j.contains("id")) {
      if (!j["id"].is_string()) fail("id must be a string");
      p.id = j["id"].get<std::string>();
    } else {
      p.id = "p" + std::to_string(line_no);
    }
    if (!j.contains("text") || !j["text"].is_string()) fail("missing text");
    p.text = j["text"].get<std::string>();
    if (p.text.empty()) fail("empty text");
    if (!j.contains("labels") || !j["labels"].is_array()) fail("missing labels array");
    for (const auto& l : j["labels"]) {
      if (!l.is_string()) fail("labels must be strings");
      const auto c = parse_concept(l.get<std::string>());
      if (!c) fail("unknown concept \"" + l.get<std::string>() + "\"");
      p.labels.set(static_cast<std::size_t>(*c));
    }
    if (p.labels.none()) fail("prompt " + p.id + " has no labels");
    if (!ids.insert(p.id).second) fail("duplicate prompt id " + p.id);
    out.push_back(std::move(p));
    if (end == text.size()) break;
  }
  return out;
}

std::vector<ProbePrompt> load_probe_dataset(const std::string& path) {
  return parse_probe_dataset(read_file_text(path), path);
}

void AuditThresholds::validate() const {
  if (!std::isfinite(fire)) throw ConfigError("audit.fire must be finite");
  if (min_prompts > max_prompts) throw ConfigError("audit.min_prompts exceeds audit.max_prompts");
  if (!(secondary_floor >= 0.0)) throw ConfigError("audit.secondary_floor must be non-negative");
  if (!(leaning_at_most >= 0.0 && leaning_at_most <= dominant_above && dominant_above <= 1.0)) {
    throw ConfigError("audit bands need 0 <= leaning_at_most <= dominant_above <= 1");
  }
}

std::size_t LayerProfile::fire_count(std::size_t neuron, double theta) const {
  std::size_t n = 0;
  for (std::size_t r = 0; r < prompts.size(); ++r) n += fired(r, neuron, theta) ? 1 : 0;
  return n;
}

ProfileResult profile_neurons(const GptModel& model, std::span<const SaeModel> saes,
                              std::span<const ProbePrompt> prompts, const BpeVocab& vocab) {
  const auto& cfg = model.config();
  for (const auto& sae : saes) {
    if (sae.config.layer < 1 || sae.config.layer > cfg.layers) {
      throw ConfigError("SAE for layer " + std::to_string(sae.config.layer) + " but the model has " +
                        std::to_string(cfg.layers) + " layers");
    }
    if (sae.config.input_dim != cfg.embed_dim) {
      throw DimensionError("SAE for layer " + std::to_string(sae.config.layer) + " expects dim " +
                           std::to_string(sae.config.input_dim) + ", model width is " +
                           std::to_string(cfg.embed_dim));
    }
  }
  std::vector<ExtractionItem> items;
  items.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    items.push_back({prompts[i].id, static_cast<std::uint32_t>(i), prompts[i].text});
  }
  auto extracted = extract_activations(model, items, vocab, ActivationSource::kPrompt);

  ProfileResult result;
  result.warnings = std::move(extracted.warnings);
  result.skipped = extracted.skipped;
  for (const auto& sae : saes) {
    const auto& set = extracted.layers[sae.config.layer - 1];
    LayerProfile p;
    p.layer = sae.config.layer;
    p.hidden = sae.config.resolved_hidden_dim();
    std::vector<std::size_t> row_prompt(set.rows());
    for (std::size_t r = 0; r < set.rows(); ++r) {
      const std::size_t idx = set.index[r].sentence_index;
      if (p.prompts.empty() || p.prompts.back() != idx) p.prompts.push_back(idx);
      row_prompt[r] = p.prompts.size() - 1;
    }
    // Latents are ReLU outputs, so 0 is the identity for the max.
    p.scores.assign(p.prompts.size() * p.hidden, 0.0f);
    for (std::size_t begin = 0; begin < set.rows(); begin += kEncodeRows) {
      const std::size_t n = std::min(kEncodeRows, set.rows() - begin);
      const auto z = sae_encode_batch(sae, std::span<const float>(set.data).subspan(begin * set.dim, n * set.dim), n);
      for (std::size_t r = 0; r < n; ++r) {
        float* dst = p.scores.data() + row_prompt[begin + r] * p.hidden;
        const float* src = z.data() + r * p.hidden;
        for (std::size_t h = 0; h < p.hidden; ++h) dst[h] = std::max(dst[h], src[h]);
      }
    }
    result.layers.push_back(std::move(p));
  }
  return result;
}

std::vector<std::uint32_t> selectivity_filter(const LayerProfile& profile, const AuditThresholds& t) {
  std::vector<std::size_t> counts(profile.hidden, 0);
  for (std::size_t r = 0; r < profile.prompts.size(); ++r) {
    for (std::size_t h = 0; h < profile.hidden; ++h) counts[h] += profile.fired(r, h, t.fire) ? 1 : 0;
  }
  std::vector<std::uint32_t> out;
  for (std::size_t h = 0; h < profile.hidden; ++h) {
    if (counts[h] >= t.min_prompts && counts[h] <= t.max_prompts) out.push_back(static_cast<std::uint32_t>(h));
  }
  return out;
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("average_precision: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(labels.size()) + " labels");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  if (hits == 0) throw UndefinedMetricError("average precision is undefined without positive labels");
  return sum / static_cast<double>(hits);
}

std::vector<NeuronConceptStat> concept_stats(const LayerProfile& profile, std::span<const ProbePrompt> prompts,
                                             Concept topic, std::span<const std::uint32_t> neurons,
                                             const AuditThresholds& t) {
  const std::size_t n = profile.prompts.size();
  const auto bit = static_cast<std::size_t>(topic);
  std::vector<std::uint8_t> labels(n);
  std::size_t positives = 0;
  for (std::size_t r = 0; r < n; ++r) {
    labels[r] = prompts[profile.prompts[r]].labels.test(bit) ? 1 : 0;
    positives += labels[r];
  }
  if (positives == 0 || positives == n) {
    throw ConfigError("concept " + std::string(concept_name(topic)) + " has " + std::to_string(positives) +
                      " positive and " + std::to_string(n - positives) +
                      " negative prompts; both must be present");
  }
  std::vector<std::optional<NeuronConceptStat>> slots(neurons.size());
  const auto count = static_cast<std::int64_t>(neurons.size());
#pragma omp parallel for schedule(dynamic, 16)
  for (std::int64_t i = 0; i < count; ++i) {
    const std::uint32_t h = neurons[i];
    std::vector<double> scores(n);
    std::size_t fired_pos = 0, fired_neg = 0;
    for (std::size_t r = 0; r < n; ++r) {
      scores[r] = profile.score(r, h);
      if (profile.fired(r, h, t.fire)) (labels[r] ? fired_pos : fired_neg)++;
    }
    NeuronConceptStat s;
    s.layer = profile.layer;
    s.neuron = h;
    s.topic = topic;
    s.p_fire_given_1 = static_cast<double>(fired_pos) / static_cast<double>(positives);
    s.p_fire_given_0 = static_cast<double>(fired_neg) / static_cast<double>(n - positives);
    s.delta_p = s.p_fire_given_1 - s.p_fire_given_0;
    if (!(s.delta_p > 0.0)) continue;
    s.ap = average_precision(scores, labels);
    slots[i] = s;
  }
  std::vector<NeuronConceptStat> out;
  for (auto& s : slots) {
    if (s) out.push_back(*s);
  }
  return out;
}

std::string_view dominance_name(Dominance d) {
  switch (d) {
    case Dominance::kDominant: return "dominant";
    case Dominance::kTwoStrong: return "two-strong";
    case Dominance::kLeaning: return "leaning";
  }
  return "leaning";
}

double polarity(double primary_ap, double secondary_ap) {
  return (primary_ap - secondary_ap) / (primary_ap + kPolarityEps);
}

Dominance dominance(double p, const AuditThresholds& t) {
  if (p > t.dominant_above) return Dominance::kDominant;
  if (p > t.leaning_at_most) return Dominance::kTwoStrong;
  return Dominance::kLeaning;
}

std::array<double, kConceptCount> positive_rates(std::span<const ProbePrompt> prompts,
                                                 std::span<const std::size_t> rows) {
  std::array<double, kConceptCount> rate{};
  if (rows.empty()) return rate;
  for (auto r : rows) {
    for (std::size_t c = 0; c < kConceptCount; ++c) rate[c] += prompts[r].labels.test(c) ? 1.0 : 0.0;
  }
  for (auto& v : rate) v /= static_cast<double>(rows.size());
  return rate;
}

std::vector<NeuronAssignment> assign_concepts(std::span<const NeuronConceptStat> stats,
                                              const std::array<double, kConceptCount>& positive_rate,
                                              const AuditThresholds& t) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<NeuronConceptStat>> by_neuron;
  for (const auto& s : stats) by_neuron[{s.layer, s.neuron}].push_back(s);
  std::vector<NeuronAssignment> out;
  out.reserve(by_neuron.size());
  for (auto& [key, list] : by_neuron) {
    std::sort(list.begin(), list.end(), [](const NeuronConceptStat& a, const NeuronConceptStat& b) {
      if (a.ap != b.ap) return a.ap > b.ap;
      if (a.delta_p != b.delta_p) return a.delta_p > b.delta_p;
      return concept_name(a.topic) < concept_name(b.topic);
    });
    NeuronAssignment a;
    a.layer = key.first;
    a.neuron = key.second;
    a.primary = list[0].topic;
    a.primary_ap = list[0].ap;
    if (list.size() > 1) {
      const auto& second = list[1];
      if (second.ap > t.secondary_floor * positive_rate[static_cast<std::size_t>(second.topic)]) {
        a.secondary = second.topic;
        a.secondary_ap = second.ap;
      }
    }
    a.polarity = polarity(a.primary_ap, a.secondary_ap);
    a.category = dominance(a.polarity, t);
    out.push_back(a);
  }
  return out;
}

LayerAudit audit_layer(const LayerProfile& profile, std::span<const ProbePrompt> prompts, const AuditThresholds& t) {
  t.validate();
  LayerAudit audit;
  audit.layer = profile.layer;
  audit.prompts = profile.prompts.size();
  const auto neurons = selectivity_filter(profile, t);
  audit.retained = neurons.size();
  for (auto c : all_concepts()) {
    auto s = concept_stats(profile, prompts, c, neurons, t);
    audit.stats.insert(audit.stats.end(), s.begin(), s.end());
  }
  audit.assignments = assign_concepts(audit.stats, positive_rates(prompts, profile.prompts), t);
  return audit;
}

std::vector<LayerSummary> layer_summaries(std::span<const NeuronAssignment> assignments,
                                          std::span<const std::uint32_t> layers) {
  std::vector<LayerSummary> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    std::vector<NeuronAssignment> rows;
    for (const auto& a : assignments) {
      if (a.layer == layers[i]) rows.push_back(a);
    }
    LayerSummary s;
    s.layer = layers[i];
    s.selective = rows.size();
    s.growth = i == 0 ? 0 : static_cast<std::int64_t>(s.selective) - static_cast<std::int64_t>(out.back().selective);
    s.mean_primary_ap = mean_of(rows, [](const NeuronAssignment& a) { return a.primary_ap; });
    s.mean_polarity = mean_of(rows, [](const NeuronAssignment& a) { return a.polarity; });
    out.push_back(s);
  }
  return out;
}

std::vector<ConceptSummary> concept_summaries(std::span<const NeuronAssignment> assignments) {
  std::vector<ConceptSummary> out;
  for (auto c : all_concepts()) {
    std::vector<NeuronAssignment> rows;
    for (const auto& a : assignments) {
      if (a.primary == c) rows.push_back(a);
    }
    ConceptSummary s;
    s.topic = c;
    s.count = rows.size();
    s.mean_primary_ap = mean_of(rows, [](const NeuronAssignment& a) { return a.primary_ap; });
    s.mean_polarity = mean_of(rows, [](const NeuronAssignment& a) { return a.polarity; });
    s.no_secondary = static_cast<std::size_t>(
        std::count_if(rows.begin(), rows.end(), [](const NeuronAssignment& a) { return !a.secondary; }));
    out.push_back(s);
  }
  return out;
}

namespace {

void normalize_widths(ConceptGraph& g) {
  std::size_t max_count = 0;
  for (const auto& e : g.edges) max_count = std::max(max_count, e.count);
  for (auto& e : g.edges) e.width = static_cast<double>(e.count) / static_cast<double>(max_count);
}

ConceptGraph graph_from_counts(std::uint32_t layer, const std::map<std::pair<Concept, Concept>, std::size_t>& counts) {
  ConceptGraph g;
  g.layer = layer;
  for (const auto& [pair, count] : counts) g.edges.push_back({pair.first, pair.second, count, 0.0});
  normalize_widths(g);
  return g;
}

}  // namespace

ConceptGraph build_concept_graph(std::span<const NeuronAssignment> assignments, std::uint32_t layer) {
  std::map<std::pair<Concept, Concept>, std::size_t> counts;
  for (const auto& a : assignments) {
    if (a.layer != layer || !a.secondary) continue;
    counts[{std::min(a.primary, *a.secondary), std::max(a.primary, *a.secondary)}]++;
  }
  return graph_from_counts(layer, counts);
}

std::string graph_to_dot(const ConceptGraph& g) {
  std::ostringstream out;
  out << "graph \"layer_" << g.layer << "\" {\n";
  out << "  node [shape=ellipse];\n";
  for (auto c : all_concepts()) out << "  \"" << concept_name(c) << "\";\n";
  for (const auto& e : g.edges) {
    char pen[32];
    std::snprintf(pen, sizeof(pen), "%.3f", 1.0 + 4.0 * e.width);
    out << "  \"" << concept_name(e.a) << "\" -- \"" << concept_name(e.b) << "\" [weight=" << e.count
        << ", penwidth=" << pen << "];\n";
  }
  out << "}\n";
  return out.str();
}

ConceptGraph graph_from_dot(std::string_view dot) {
  const auto fail = [](const std::string& what) -> ConceptGraph { throw InputError("DOT: " + what); };
  const std::string_view head = "graph \"layer_";
  const auto h = dot.find(head);
  if (h == std::string_view::npos) return fail("missing graph header");
  std::uint32_t layer = 0;
  std::size_t i = h + head.size();
  if (i >= dot.size() || !std::isdigit(static_cast<unsigned char>(dot[i]))) return fail("bad layer number");
  while (i < dot.size() && std::isdigit(static_cast<unsigned char>(dot[i]))) layer = layer * 10 + (dot[i++] - '0');

  std::map<std::pair<Concept, Concept>, std::size_t> counts;
  std::istringstream lines{std::string(dot)};
  std::string line;
  auto quoted = [&](const std::string& s, std::size_t from, std::size_t& after) -> Concept {
    const auto open = s.find('"', from);
    const auto close = open == std::string::npos ? std::string::npos : s.find('"', open + 1);
    if (close == std::string::npos) throw InputError("DOT: unterminated node name in: " + s);
    const auto c = parse_concept(std::string_view(s).substr(open + 1, close - open - 1));
    if (!c) throw InputError("DOT: unknown concept in: " + s);
    after = close + 1;
    return *c;
  };
  while (std::getline(lines, line)) {
    const auto arrow = line.find("--");
    if (arrow == std::string::npos) continue;
    std::size_t after = 0;
    const Concept a = quoted(line, 0, after);
    const Concept b = quoted(line, arrow, after);
    const auto w = line.find("weight=", after);
    if (w == std::string::npos) return fail("edge without weight: " + line);
    std::size_t count = 0;
    std::size_t j = w + 7;
    if (j >= line.size() || !std::isdigit(static_cast<unsigned char>(line[j]))) return fail("bad weight: " + line);
    while (j < line.size() && std::isdigit(static_cast<unsigned char>(line[j]))) count = count * 10 + (line[j++] - '0');
    if (a == b || count == 0) return fail("invalid edge: " + line);
    if (!counts.emplace(std::make_pair(std::min(a, b), std::max(a, b)), count).second) {
      return fail("duplicate edge: " + line);
    }
  }
  return graph_from_counts(layer, counts);
}

std::string graph_to_json(const ConceptGraph& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (auto c : all_concepts()) nodes.push_back(concept_name(c));
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges) {
    edges.push_back({{"a", concept_name(e.a)}, {"b", concept_name(e.b)}, {"count", e.count}, {"width", e.width}});
  }
  return nlohmann::json{{"layer", g.layer}, {"nodes", nodes}, {"edges", edges}}.dump(1) + "\n";
}

ConceptGraph graph_from_json(std::string_view json) {
  try {
    const auto j = nlohmann::json::parse(json);
    ConceptGraph g;
    g.layer = j.at("layer").get<std::uint32_t>();
    for (const auto& e : j.at("edges")) {
      g.edges.push_back({concept_from_json(e.at("a")), concept_from_json(e.at("b")), e.at("count").get<std::size_t>(),
                         e.at("width").get<double>()});
    }
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("graph JSON: ") + e.what());
  }
}

std::vector<NeuronAssignment> top_detectors(std::span<const NeuronAssignment> assignments, std::size_t limit) {
  std::vector<NeuronAssignment> rows(assignments.begin(), assignments.end());
  std::sort(rows.begin(), rows.end(), [](const NeuronAssignment& a, const NeuronAssignment& b) {
    if (a.primary_ap != b.primary_ap) return a.primary_ap > b.primary_ap;
    if (a.polarity != b.polarity) return a.polarity > b.polarity;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.neuron < b.neuron;
  });
  if (rows.size() > limit) rows.resize(limit);
  return rows;
}

namespace {

nlohmann::json assignment_json(const NeuronAssignment& a) {
  return {{"layer", a.layer},
          {"neuron", a.neuron},
          {"primary", concept_name(a.primary)},
          {"primary_ap", a.primary_ap},
          {"secondary", a.secondary ? nlohmann::json(concept_name(*a.secondary)) : nlohmann::json()},
          {"secondary_ap", a.secondary_ap},
          {"polarity", a.polarity},
          {"category", dominance_name(a.category)}};
}

}  // namespace

std::string assignment_to_json_line(const NeuronAssignment& a) { return assignment_json(a).dump(); }

NeuronAssignment assignment_from_json_line(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    NeuronAssignment a;
    a.layer = j.at("layer").get<std::uint32_t>();
    a.neuron = j.at("neuron").get<std::uint32_t>();
    a.primary = concept_from_json(j.at("primary"));
    a.primary_ap = j.at("primary_ap").get<double>();
    if (!j.at("secondary").is_null()) a.secondary = concept_from_json(j.at("secondary"));
    a.secondary_ap = j.at("secondary_ap").get<double>();
    a.polarity = j.at("polarity").get<double>();
    const auto cat = j.at("category").get<std::string>();
    if (cat == "dominant") {
      a.category = Dominance::kDominant;
    } else if (cat == "two-strong") {
      a.category = Dominance::kTwoStrong;
    } else if (cat == "leaning") {
      a.category = Dominance::kLeaning;
    } else {
      throw InputError("unknown category \"" + cat + "\"");
    }
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("assignment record: ") + e.what());
  }
}

std::string layer_summaries_json(std::span<const LayerSummary> rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"layer", r.layer},
                   {"selective", r.selective},
                   {"growth", r.growth},
                   {"mean_primary_ap", optional_json(r.mean_primary_ap)},
                   {"mean_polarity", optional_json(r.mean_polarity)}});
  }
  return out.dump(1) + "\n";
}

std::string concept_summaries_json(std::span<const ConceptSummary> rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"concept", concept_name(r.topic)},
                   {"count", r.count},
                   {"mean_primary_ap", optional_json(r.mean_primary_ap)},
                   {"mean_polarity", optional_json(r.mean_polarity)},
                   {"no_secondary", r.no_secondary}});
  }
  return out.dump(1) + "\n";
}

std::string top_detectors_json(std::span<const NeuronAssignment> rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) out.push_back(assignment_json(r));
  return out.dump(1) + "\n";
}

}  // namespace cprobe
