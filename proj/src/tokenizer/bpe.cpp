#include "cprobe/tokenizer/bpe.h"

#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "cprobe/core/binary_io.h"
#include "cprobe/core/errors.h"
#include "cprobe/tokenizer/unicode.h"

namespace cprobe {

namespace {

enum class CharClass { kLetter, kNumber, kSpace, kOther };

CharClass classify(const unicode::Decoded& d) {
  if (!d.valid) return CharClass::kOther;
  if (unicode::is_letter(d.codepoint)) return CharClass::kLetter;
  if (unicode::is_number(d.codepoint)) return CharClass::kNumber;
  if (unicode::is_space(d.codepoint)) return CharClass::kSpace;
  return CharClass::kOther;
}

// Length of the contraction suffix at `pos` ('s, 't, 're, 've, 'm, 'll, 'd),
// or 0.
std::size_t contraction_at(std::string_view text, std::size_t pos) {
  if (text[pos] != '\'') return 0;
  const std::string_view rest = text.substr(pos + 1);
  for (std::string_view suffix : {"s", "t", "re", "ve", "m", "ll", "d"}) {
    if (rest.starts_with(suffix)) return 1 + suffix.size();
  }
  return 0;
}

std::unordered_map<char32_t, std::uint8_t> build_byte_decoder() {
  std::unordered_map<char32_t, std::uint8_t> out;
  const auto& enc = BpeVocab::byte_encoder();
  for (int b = 0; b < 256; ++b) out[unicode::decode_at(enc[b], 0).codepoint] = static_cast<std::uint8_t>(b);
  return out;
}

// Applies merges to one pre-token, returning its symbols.
std::vector<std::string> bpe_symbols(std::string_view piece, const BpeVocab& vocab) {
  const auto& enc = BpeVocab::byte_encoder();
  std::vector<std::string> symbols;
  symbols.reserve(piece.size());
  for (char c : piece) symbols.push_back(enc[static_cast<unsigned char>(c)]);
  while (symbols.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    std::size_t best = 0;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      if (auto r = vocab.merge_rank(symbols[i], symbols[i + 1]); r && *r < best_rank) {
        best_rank = *r;
        best = i;
      }
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    // Merge every non-overlapping occurrence of the winning pair, left to right.
    const std::string left = symbols[best], right = symbols[best + 1];
    std::vector<std::string> merged;
    merged.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
        merged.push_back(left + right);
        i += 2;
      } else {
        merged.push_back(std::move(symbols[i]));
        i += 1;
      }
    }
    symbols = std::move(merged);
  }
  return symbols;
}

}  // namespace

const std::array<std::string, 256>& BpeVocab::byte_encoder() {
  static const std::array<std::string, 256> table = [] {
    std::array<std::string, 256> t;
    std::array<bool, 256> printable{};
    for (int b = '!'; b <= '~'; ++b) printable[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) printable[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) printable[b] = true;
    char32_t next = 256;
    for (int b = 0; b < 256; ++b) {
      unicode::append_utf8(t[b], printable[b] ? static_cast<char32_t>(b) : next++);
    }
    return t;
  }();
  return table;
}

BpeVocab::BpeVocab(std::unordered_map<std::string, std::int32_t> token_to_id,
                   std::vector<Merge> merges)
    : token_to_id_(std::move(token_to_id)) {
  id_to_token_.assign(token_to_id_.size(), std::string());
  std::vector<bool> used(token_to_id_.size(), false);
  for (const auto& [token, id] : token_to_id_) {
    if (id < 0 || static_cast<std::size_t>(id) >= token_to_id_.size()) {
      throw InputError("vocabulary id " + std::to_string(id) + " for token '" + token +
                       "' is outside [0, " + std::to_string(token_to_id_.size()) + ")");
    }
    if (used[id]) throw InputError("vocabulary id " + std::to_string(id) + " is assigned twice");
    used[id] = true;
    id_to_token_[id] = token;
  }
  for (const auto& symbol : byte_encoder()) {
    if (!token_to_id_.contains(symbol)) {
      throw InputError("vocabulary lacks the byte symbol '" + symbol + "'");
    }
  }
  for (std::size_t rank = 0; rank < merges.size(); ++rank) {
    const auto& [left, right] = merges[rank];
    if (!token_to_id_.contains(left + right)) {
      throw InputError("merge " + std::to_string(rank + 1) + " ('" + left + "' '" + right +
                       "') produces a token missing from the vocabulary");
    }
    merge_ranks_.try_emplace(left + " " + right, rank);
  }
}

BpeVocab BpeVocab::load(const std::string& vocab_json_path, const std::string& merges_path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file_text(vocab_json_path));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(vocab_json_path + ": " + e.what());
  }
  if (!doc.is_object()) throw InputError(vocab_json_path + ": expected a JSON object");
  std::unordered_map<std::string, std::int32_t> token_to_id;
  for (const auto& [token, id] : doc.items()) {
    if (!id.is_number_integer()) throw InputError(vocab_json_path + ": non-integer id for '" + token + "'");
    token_to_id.emplace(token, id.get<std::int32_t>());
  }
  std::istringstream lines(read_file_text(merges_path));
  std::vector<Merge> merges;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (line_no == 1 && line.starts_with("#version"))) continue;
    const auto space = line.find(' ');
    if (space == std::string::npos || space == 0 || space + 1 == line.size() ||
        line.find(' ', space + 1) != std::string::npos) {
      throw ValidationError(merges_path + ": expected two space-separated symbols", line_no);
    }
    merges.emplace_back(line.substr(0, space), line.substr(space + 1));
  }
  return BpeVocab(std::move(token_to_id), std::move(merges));
}

std::optional<std::int32_t> BpeVocab::id_of(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

const std::string& BpeVocab::token_of(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside [0, " +
                     std::to_string(id_to_token_.size()) + ")");
  }
  return id_to_token_[id];
}

std::optional<std::size_t> BpeVocab::merge_rank(std::string_view left,
                                                std::string_view right) const {
  std::string key;
  key.reserve(left.size() + right.size() + 1);
  key.append(left).append(" ").append(right);
  auto it = merge_ranks_.find(key);
  if (it == merge_ranks_.end()) return std::nullopt;
  return it->second;
}

std::int32_t BpeVocab::eot_id() const {
  auto id = id_of(kEndOfText);
  if (!id) throw InputError("vocabulary has no " + std::string(kEndOfText) + " token");
  return *id;
}

std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> pieces;
  std::size_t pos = 0;
  // Consumes a run of one class starting at `from`; returns the end offset.
  auto run = [&](std::size_t from, CharClass cls) {
    std::size_t end = from;
    while (end < text.size()) {
      auto d = unicode::decode_at(text, end);
      if (classify(d) != cls) break;
      end += d.length;
    }
    return end;
  };
  while (pos < text.size()) {
    if (std::size_t n = contraction_at(text, pos)) {
      pieces.push_back(text.substr(pos, n));
      pos += n;
      continue;
    }
    const auto here = unicode::decode_at(text, pos);
    const CharClass cls = classify(here);
    // " ?X+" alternatives: an optional single ASCII space before a run.
    std::size_t start = pos;
    CharClass run_cls = cls;
    if (text[pos] == ' ' && pos + 1 < text.size()) {
      const CharClass next = classify(unicode::decode_at(text, pos + 1));
      if (next != CharClass::kSpace) {
        start = pos + 1;
        run_cls = next;
      }
    }
    if (run_cls != CharClass::kSpace) {
      const std::size_t end = run(start, run_cls);
      pieces.push_back(text.substr(pos, end - pos));
      pos = end;
      continue;
    }
    // Whitespace: \s+(?!\S) leaves the last space char for the next piece
    // when non-space text follows; a lone space char falls through to \s+.
    std::size_t end = pos, last_start = pos;
    while (end < text.size()) {
      auto d = unicode::decode_at(text, end);
      if (classify(d) != CharClass::kSpace) break;
      last_start = end;
      end += d.length;
    }
    if (end < text.size() && last_start > pos) end = last_start;
    pieces.push_back(text.substr(pos, end - pos));
    pos = end;
  }
  return pieces;
}

std::vector<std::int32_t> encode(std::string_view text, const BpeVocab& vocab) {
  std::vector<std::int32_t> ids;
  for (std::string_view piece : pretokenize(text)) {
    for (const auto& symbol : bpe_symbols(piece, vocab)) {
      auto id = vocab.id_of(symbol);
      if (!id) throw InputError("BPE produced symbol '" + symbol + "' missing from vocabulary");
      ids.push_back(*id);
    }
  }
  return ids;
}

std::string decode(std::span<const std::int32_t> ids, const BpeVocab& vocab) {
  static const auto byte_decoder = build_byte_decoder();
  std::string out;
  for (std::int32_t id : ids) {
    const std::string& token = vocab.token_of(id);
    for (std::size_t pos = 0; pos < token.size();) {
      auto d = unicode::decode_at(token, pos);
      auto it = d.valid ? byte_decoder.find(d.codepoint) : byte_decoder.end();
      if (it != byte_decoder.end()) {
        out += static_cast<char>(it->second);
      } else {
        out.append(token, pos, d.length);
      }
      pos += d.length;
    }
  }
  return out;
}

}  // namespace cprobe
