#include "cprobe/activations/activations.h"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "cprobe/core/binary_io.h"
#include "cprobe/core/errors.h"

namespace cprobe {

namespace {

constexpr char kMagic[8] = {'C', 'P', 'A', 'C', 'T', 'S', 'E', 'T'};
constexpr std::uint32_t kVersion = 1;

struct ItemRows {
  std::vector<std::vector<float>> per_layer;  // tokens × dim per layer
  std::size_t tokens = 0;
  bool skipped = false;
  std::string warning;
};

}  // namespace

void ActivationSet::validate() const {
  if (data.size() != index.size() * static_cast<std::size_t>(dim)) {
    throw FormatError("activation data holds " + std::to_string(data.size()) + " values for " +
                          std::to_string(index.size()) + " rows of dim " + std::to_string(dim),
                      0);
  }
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r].source_id >= sources.size()) {
      throw FormatError("row " + std::to_string(r) + " references unknown source " +
                            std::to_string(index[r].source_id),
                        0);
    }
  }
}

std::vector<ExtractionItem> sentence_items(std::span<const SentenceRecord> records) {
  std::vector<ExtractionItem> out;
  for (const auto& r : records) {
    if (r.admitted) out.push_back({r.doc_id, static_cast<std::uint32_t>(r.index), r.text});
  }
  return out;
}

ExtractionResult extract_activations(const GptModel& model, std::span<const ExtractionItem> items,
                                     const BpeVocab& vocab, ActivationSource source) {
  const auto& cfg = model.config();
  const std::size_t d = cfg.embed_dim;
  std::vector<ItemRows> results(items.size());
  const auto n = static_cast<std::int64_t>(items.size());
  std::vector<std::exception_ptr> errors(items.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) {
    try {
      NoGradGuard no_grad;
      auto& out = results[i];
      const auto ids = encode(items[i].text, vocab);
      if (ids.empty() || ids.size() > cfg.context_length) {
        out.skipped = true;
        out.warning = items[i].source_id + "#" + std::to_string(items[i].sentence_index) + ": " +
                      std::to_string(ids.size()) + " tokens, outside 1.." +
                      std::to_string(cfg.context_length) + "; skipped";
        continue;
      }
      HiddenStateTrace trace;
      ForwardOptions opts;
      opts.trace = &trace;
      model.forward(ids, opts);
      out.tokens = ids.size();
      for (const auto& h : trace.layers) out.per_layer.emplace_back(h.data().begin(), h.data().end());
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  ExtractionResult result;
  result.layers.resize(cfg.layers);
  std::map<std::string, std::uint32_t> source_ids;
  std::vector<std::string> sources;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto& set = result.layers[l];
    set.layer = static_cast<std::uint32_t>(l + 1);
    set.dim = static_cast<std::uint32_t>(d);
    set.source = source;
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& r = results[i];
    if (r.skipped) {
      result.warnings.push_back(r.warning);
      ++result.skipped;
      continue;
    }
    auto [it, inserted] = source_ids.try_emplace(items[i].source_id, static_cast<std::uint32_t>(sources.size()));
    if (inserted) sources.push_back(items[i].source_id);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      auto& set = result.layers[l];
      set.data.insert(set.data.end(), r.per_layer[l].begin(), r.per_layer[l].end());
      for (std::size_t t = 0; t < r.tokens; ++t) {
        set.index.push_back({it->second, items[i].sentence_index, static_cast<std::uint32_t>(t)});
      }
    }
  }
  for (auto& set : result.layers) set.sources = sources;
  return result;
}

std::pair<ActivationSet, ActivationSet> split_activation_set(const ActivationSet& set, double ratio,
                                                             std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0, 1)");
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> group_of;
  std::vector<std::size_t> row_group(set.rows());
  for (std::size_t r = 0; r < set.rows(); ++r) {
    const auto key = std::make_pair(set.index[r].source_id, set.index[r].sentence_index);
    auto [it, inserted] = group_of.try_emplace(key, group_of.size());
    row_group[r] = it->second;
  }
  const std::size_t groups = group_of.size();
  if (groups < 2) {
    throw ConfigError("need at least two sentences to split activations, found " + std::to_string(groups));
  }
  // Fisher-Yates with the project generator keeps the split independent of
  // the standard library's shuffle.
  std::vector<std::size_t> order(groups);
  for (std::size_t g = 0; g < groups; ++g) order[g] = g;
  Rng rng(seed);
  for (std::size_t g = groups - 1; g > 0; --g) std::swap(order[g], order[rng.below(g + 1)]);
  std::size_t n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(groups)));
  n_train = std::clamp<std::size_t>(n_train, 1, groups - 1);
  std::vector<bool> in_train(groups, false);
  for (std::size_t g = 0; g < n_train; ++g) in_train[order[g]] = true;

  ActivationSet train, val;
  for (auto* s : {&train, &val}) {
    s->layer = set.layer;
    s->dim = set.dim;
    s->source = set.source;
    s->sources = set.sources;
  }
  for (std::size_t r = 0; r < set.rows(); ++r) {
    auto& dst = in_train[row_group[r]] ? train : val;
    const auto row = set.row(r);
    dst.data.insert(dst.data.end(), row.begin(), row.end());
    dst.index.push_back(set.index[r]);
  }
  return {std::move(train), std::move(val)};
}

void write_activation_file(const ActivationSet& set, const std::string& path) {
  set.validate();
  std::ofstream file(path, std::ios::binary);
  if (!file) throw InputError("cannot open " + path + " for writing");
  BinaryWriter w(file);
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kVersion);
  w.u32(0);
  w.u32(set.layer);
  w.u32(set.dim);
  w.u64(set.rows());
  w.u32(static_cast<std::uint32_t>(set.source));
  w.u32(0);
  w.floats(set.data);
  w.u32(static_cast<std::uint32_t>(set.sources.size()));
  for (const auto& s : set.sources) w.string(s);
  for (const auto& ref : set.index) {
    w.u32(ref.source_id);
    w.u32(ref.sentence_index);
    w.u32(ref.token_position);
  }
  if (!file) throw InputError("failed writing " + path);
}

ActivationSet read_activation_file(const std::string& path) {
  const auto image = read_file_bytes(path);
  BinaryReader r(image);
  char magic[sizeof(kMagic)];
  r.bytes(magic, sizeof(magic), "magic");
  if (!std::equal(magic, magic + sizeof(magic), kMagic)) {
    throw FormatError(path + ": bad magic; expected an activation file", 0);
  }
  const auto version_at = r.offset();
  if (const auto v = r.u32("version"); v != kVersion) {
    throw FormatError(path + ": unsupported activation file version " + std::to_string(v), version_at);
  }
  r.u32("flags");
  ActivationSet set;
  set.layer = r.u32("layer");
  const auto dim_at = r.offset();
  set.dim = r.u32("dim");
  if (set.dim == 0) throw FormatError(path + ": zero dim", dim_at);
  const auto rows = r.u64("row count");
  const auto source_at = r.offset();
  const auto source = r.u32("source");
  if (source > 1) throw FormatError(path + ": unknown source kind " + std::to_string(source), source_at);
  set.source = static_cast<ActivationSource>(source);
  r.u32("reserved");
  const std::uint64_t row_bytes = static_cast<std::uint64_t>(set.dim) * sizeof(float);
  if (rows > r.remaining() / row_bytes) {
    // Report the offset of the first incomplete row.
    const std::uint64_t whole = r.remaining() / row_bytes;
    throw FormatError(path + ": header declares " + std::to_string(rows) + " rows of dim " +
                          std::to_string(set.dim) + " but row " + std::to_string(whole) + " is incomplete",
                      r.offset() + whole * row_bytes);
  }
  set.data.resize(rows * set.dim);
  r.bytes(set.data.data(), rows * row_bytes, "activation rows");
  const auto count = r.u32("source count");
  for (std::uint32_t i = 0; i < count; ++i) set.sources.push_back(r.string("source id", 1u << 16));
  set.index.resize(rows);
  for (auto& ref : set.index) {
    const auto at = r.offset();
    ref.source_id = r.u32("row source");
    ref.sentence_index = r.u32("row sentence index");
    ref.token_position = r.u32("row token position");
    if (ref.source_id >= set.sources.size()) {
      throw FormatError(path + ": row index references unknown source", at);
    }
  }
  if (r.remaining() != 0) {
    throw FormatError(path + ": " + std::to_string(r.remaining()) + " trailing bytes; rows and index disagree",
                      r.offset());
  }
  return set;
}

void write_activation_manifest(const std::string& path, const std::vector<ActivationFileEntry>& entries) {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& e : entries) {
    files.push_back({{"layer", e.layer}, {"file", e.file}, {"rows", e.rows}, {"dim", e.dim}, {"sha256", e.sha256}});
  }
  write_file_text(path, nlohmann::json{{"files", files}}.dump(1) + "\n");
}

std::vector<ActivationFileEntry> read_activation_manifest(const std::string& path) {
  std::vector<ActivationFileEntry> out;
  try {
    const auto j = nlohmann::json::parse(read_file_text(path));
    for (const auto& f : j.at("files")) {
      out.push_back({f.at("layer").get<std::uint32_t>(), f.at("file").get<std::string>(),
                     f.at("rows").get<std::uint64_t>(), f.at("dim").get<std::uint32_t>(),
                     f.at("sha256").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path + ": " + e.what());
  }
  return out;
}

}  // namespace cprobe
