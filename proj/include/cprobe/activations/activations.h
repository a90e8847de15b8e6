#pragma once

// Per-layer hidden-state datasets: one row per token position of every
// processed sentence (or prompt), with provenance.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cprobe/corpus/corpus.h"
#include "cprobe/gpt/gpt.h"
#include "cprobe/tokenizer/bpe.h"

namespace cprobe {

enum class ActivationSource : std::uint32_t { kSentence = 0, kPrompt = 1 };

struct RowRef {
  std::uint32_t source_id = 0;  // index into ActivationSet::sources
  std::uint32_t sentence_index = 0;
  std::uint32_t token_position = 0;
  bool operator==(const RowRef&) const = default;
};

struct ActivationSet {
  std::uint32_t layer = 1;  // 1-based
  std::uint32_t dim = 0;
  ActivationSource source = ActivationSource::kSentence;
  std::vector<std::string> sources;  // document or prompt ids
  std::vector<float> data;           // rows × dim, row-major
  std::vector<RowRef> index;

  std::size_t rows() const { return index.size(); }
  std::span<const float> row(std::size_t r) const { return std::span<const float>(data).subspan(r * dim, dim); }
  // Throws FormatError when data, index and the string table disagree.
  void validate() const;
  bool operator==(const ActivationSet&) const = default;
};

struct ExtractionItem {
  std::string source_id;
  std::uint32_t sentence_index = 0;
  std::string text;
};

// Admitted sentences only, in order.
std::vector<ExtractionItem> sentence_items(std::span<const SentenceRecord> records);

struct ExtractionResult {
  std::vector<ActivationSet> layers;  // one per model layer, layer i+1 at [i]
  std::vector<std::string> warnings;
  std::size_t skipped = 0;
};

// Eval-mode forward of every item; appends each block output row to the
// matching layer. Items longer than the context are skipped with a warning.
ExtractionResult extract_activations(const GptModel& model, std::span<const ExtractionItem> items,
                                     const BpeVocab& vocab,
                                     ActivationSource source = ActivationSource::kSentence);

// Shuffles the distinct (source, sentence) groups with `seed` and sends
// round(ratio·groups) of them to train, keeping each group's rows together
// and the original row order within each side. Throws ConfigError for fewer
// than two groups or a ratio outside (0, 1).
std::pair<ActivationSet, ActivationSet> split_activation_set(const ActivationSet& set, double ratio,
                                                             std::uint64_t seed);

// Layout (little-endian):
//   "CPACTSET" u32 version u32 flags(0)
//   u32 layer u32 dim u64 rows u32 source u32 reserved(0)
//   rows × dim f32
//   u32 source count, each (u32 length, bytes); rows × (u32 source_id,
//   u32 sentence_index, u32 token_position)
void write_activation_file(const ActivationSet& set, const std::string& path);
ActivationSet read_activation_file(const std::string& path);

struct ActivationFileEntry {
  std::uint32_t layer = 0;
  std::string file;  // relative to the manifest
  std::uint64_t rows = 0;
  std::uint32_t dim = 0;
  std::string sha256;
};

void write_activation_manifest(const std::string& path, const std::vector<ActivationFileEntry>& entries);
std::vector<ActivationFileEntry> read_activation_manifest(const std::string& path);

}  // namespace cprobe
