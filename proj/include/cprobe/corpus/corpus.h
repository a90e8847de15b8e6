#pragma once

// Novel ingestion: paratext cleaning, sentence splitting and the tokenized
// train/validation streams.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cprobe/tokenizer/bpe.h"

namespace cprobe {

enum class SplitRole { kTrain, kEval };

struct ManifestEntry {
  std::string id;
  std::string title;
  std::string author;
  std::string filename;
  SplitRole role = SplitRole::kTrain;
};

struct Document {
  std::string id;
  std::string title;
  std::string author;
  std::string text;
  SplitRole role = SplitRole::kTrain;
};

struct CleanResult {
  std::string text;
  std::vector<std::string> warnings;
};

// Keeps the body between the "*** START OF" / "*** END OF" lines, repairs
// invalid UTF-8, normalizes line endings and quotes, removes control
// characters and [Illustration]/[Footnote] blocks, strips trailing blanks
// and collapses blank-line runs. Missing markers keep the whole text and
// add a warning. Throws InputError if nothing remains. Idempotent.
CleanResult clean_document(std::string_view raw);

struct SentenceRecord {
  std::string doc_id;
  std::size_t index = 0;
  std::string text;
  std::size_t word_count = 0;
  bool admitted = false;
};

struct SentenceBand {
  std::size_t min_words = 5;
  std::size_t max_words = 60;
};

std::size_t word_count(std::string_view sentence);

// Rule-based splitter. A sentence ends at a run of . ! ? (plus closing
// quotes or brackets) followed by whitespace and an uppercase letter or an
// opening quote. Mr. Mrs. Dr. St. never end a sentence. Paragraph breaks
// always do. Every record is returned; `admitted` marks the word band.
std::vector<SentenceRecord> split_sentences(const Document& doc, const SentenceBand& band = {});

std::vector<ManifestEntry> load_manifest(const std::string& path);

// Reads and cleans every manifest entry from `dir` (in parallel). Documents
// come back ordered by id. Cleaning warnings are appended to `warnings`,
// prefixed with the document id.
std::vector<Document> load_corpus(const std::string& dir, const std::vector<ManifestEntry>& manifest,
                                  std::vector<std::string>* warnings = nullptr);

struct TokenStreams {
  std::vector<std::int32_t> train;
  std::vector<std::int32_t> validation;
  std::size_t train_documents = 0;
  std::size_t validation_documents = 0;
};

// Tokenizes documents in order, joining them with end-of-text separators.
// The first b documents go to train, with b chosen so that b's token share
// is nearest `split_ratio` while both sides keep at least one document.
// Throws ConfigError for fewer than two documents or a ratio outside (0, 1).
TokenStreams build_token_stream(const std::vector<Document>& docs, const BpeVocab& vocab,
                                double split_ratio);

// Concatenates documents with end-of-text separators (held-out streams).
std::vector<std::int32_t> concat_documents(const std::vector<Document>& docs, const BpeVocab& vocab);

// Token stream file: "CPTK", u32 version, u64 count, then u32 ids.
void write_token_stream(const std::string& path, const std::vector<std::int32_t>& ids);
std::vector<std::int32_t> read_token_stream(const std::string& path);

void write_sentences(const std::string& path, const std::vector<SentenceRecord>& records);
std::vector<SentenceRecord> read_sentences(const std::string& path);

}  // namespace cprobe
