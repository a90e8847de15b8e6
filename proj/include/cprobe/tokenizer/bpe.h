#pragma once

// Byte-level BPE tokenizer reading the published GPT-2 asset formats
// (vocab.json: token -> id; merges.txt: one "left right" pair per line in
// priority order).

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cprobe {

inline constexpr std::string_view kEndOfText = "<|endoftext|>";

class BpeVocab {
 public:
  using Merge = std::pair<std::string, std::string>;

  // Validates that ids form a bijection onto [0, size), that every merge
  // result is a token, and that all 256 byte symbols are present.
  BpeVocab(std::unordered_map<std::string, std::int32_t> token_to_id, std::vector<Merge> merges);

  static BpeVocab load(const std::string& vocab_json_path, const std::string& merges_path);

  std::size_t size() const { return id_to_token_.size(); }
  std::optional<std::int32_t> id_of(std::string_view token) const;
  const std::string& token_of(std::int32_t id) const;
  // Rank of the merge (left, right); lower merges first.
  std::optional<std::size_t> merge_rank(std::string_view left, std::string_view right) const;
  std::size_t merge_count() const { return merge_ranks_.size(); }

  // Id of the end-of-text separator; throws InputError when absent.
  std::int32_t eot_id() const;

  // Printable stand-in for each raw byte (GPT-2 bytes_to_unicode), UTF-8.
  static const std::array<std::string, 256>& byte_encoder();

 private:
  std::unordered_map<std::string, std::int32_t> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, std::size_t> merge_ranks_;
};

// Splits text into pre-tokens with the GPT-2 pattern
//   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
// Pieces are byte slices of the input and concatenate back to it.
std::vector<std::string_view> pretokenize(std::string_view text);

std::vector<std::int32_t> encode(std::string_view text, const BpeVocab& vocab);

// Throws IndexError for ids outside the vocabulary.
std::string decode(std::span<const std::int32_t> ids, const BpeVocab& vocab);

}  // namespace cprobe
