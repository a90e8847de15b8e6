#include "cprobe/corpus/corpus.h"

#include <algorithm>
#include <cctype>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cprobe/core/binary_io.h"
#include "cprobe/core/errors.h"
#include "cprobe/tokenizer/unicode.h"

namespace cprobe {

namespace {

constexpr char kStreamMagic[4] = {'C', 'P', 'T', 'K'};
constexpr std::uint32_t kStreamVersion = 1;

bool iequals_prefix(std::string_view s, std::string_view prefix) {
  if (s.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (std::toupper(static_cast<unsigned char>(s[i])) != prefix[i]) return false;
  }
  return true;
}

// "*** START OF" / "***START OF", case-insensitive.
bool is_marker(std::string_view line, std::string_view word) {
  if (!line.starts_with("***")) return false;
  line.remove_prefix(3);
  if (line.starts_with(' ')) line.remove_prefix(1);
  return iequals_prefix(line, word);
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (true) {
    const auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) {
      lines.push_back(text.substr(start));
      return lines;
    }
    lines.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
}

// UTF-8 repair, BOM removal, line-ending and quote normalization, control
// character removal.
std::string normalize_characters(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size();) {
    const auto d = unicode::decode_at(raw, i);
    const char32_t cp = d.codepoint;
    const std::size_t at = i;
    i += d.length;
    if (cp == '\r') {
      out += '\n';
      if (i < raw.size() && raw[i] == '\n') ++i;
      continue;
    }
    if (cp == '\n' || cp == '\t') {
      out += static_cast<char>(cp);
      continue;
    }
    if (cp < 0x20 || (cp >= 0x7F && cp <= 0x9F) || cp == 0xFEFF) continue;
    if (cp == 0x2018 || cp == 0x2019) {
      out += '\'';
    } else if (cp == 0x201C || cp == 0x201D) {
      out += '"';
    } else if (d.valid) {
      out.append(raw, at, d.length);
    } else {
      unicode::append_utf8(out, 0xFFFD);
    }
  }
  return out;
}

// Removes "[Illustration...]" and "[Footnote...]" blocks, repeating until
// no block is left so that removal cannot expose a new one.
std::string remove_paratext(std::string text) {
  while (true) {
    std::string out;
    out.reserve(text.size());
    bool removed = false;
    std::size_t pos = 0;
    while (pos < text.size()) {
      const auto open = text.find('[', pos);
      if (open == std::string::npos) break;
      const std::string_view rest = std::string_view(text).substr(open + 1);
      const auto close = text.find(']', open);
      if ((rest.starts_with("Illustration") || rest.starts_with("Footnote")) &&
          close != std::string::npos) {
        out.append(text, pos, open - pos);
        pos = close + 1;
        removed = true;
      } else {
        out.append(text, pos, open + 1 - pos);
        pos = open + 1;
      }
    }
    out.append(text, std::min(pos, text.size()));
    if (!removed) return out;
    text = std::move(out);
  }
}

bool is_sentence_end(char c) { return c == '.' || c == '!' || c == '?'; }
bool is_closer(char c) { return c == '"' || c == '\'' || c == ')' || c == ']'; }
bool is_opener(char c) { return c == '"' || c == '\'' || c == '(' || c == '['; }

bool is_abbreviation(std::string_view word) {
  while (!word.empty() && is_opener(word.front())) word.remove_prefix(1);
  return word == "Mr" || word == "Mrs" || word == "Dr" || word == "St";
}

void split_paragraph(std::string_view para, const Document& doc, const SentenceBand& band,
                     std::vector<SentenceRecord>& out) {
  auto emit = [&](std::string_view s) {
    if (s.empty()) return;
    SentenceRecord r;
    r.doc_id = doc.id;
    r.index = out.size();
    r.text = std::string(s);
    r.word_count = word_count(s);
    r.admitted = r.word_count >= band.min_words && r.word_count <= band.max_words;
    out.push_back(std::move(r));
  };
  std::size_t start = 0;
  for (std::size_t i = 0; i < para.size(); ++i) {
    if (!is_sentence_end(para[i])) continue;
    std::size_t j = i;
    while (j < para.size() && is_sentence_end(para[j])) ++j;
    while (j < para.size() && is_closer(para[j])) ++j;
    if (j + 1 >= para.size() || para[j] != ' ') {
      i = j - 1;
      continue;
    }
    const char next = para[j + 1];
    if (!std::isupper(static_cast<unsigned char>(next)) && !is_opener(next)) {
      i = j - 1;
      continue;
    }
    if (j == i + 1 && para[i] == '.') {
      const auto word_start = para.rfind(' ', i);
      const std::size_t ws = word_start == std::string_view::npos ? 0 : word_start + 1;
      if (is_abbreviation(para.substr(ws, i - ws))) continue;
    }
    emit(para.substr(start, j - start));
    start = j + 1;
    i = j;
  }
  emit(para.substr(start));
}

CleanResult clean_once(std::string_view raw) {
  CleanResult result;
  const std::string normalized = normalize_characters(raw);
  const auto lines = split_lines(normalized);
  std::size_t end = lines.size();
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (is_marker(lines[i], "END OF")) {
      end = i;
      break;
    }
  }
  std::size_t begin = 0;
  bool have_start = false;
  for (std::size_t i = end; i-- > 0;) {
    if (is_marker(lines[i], "START OF")) {
      begin = i + 1;
      have_start = true;
      break;
    }
  }
  if (!have_start) result.warnings.push_back("start marker not found; keeping text from the beginning");
  if (end == lines.size()) result.warnings.push_back("end marker not found; keeping text to the end");

  std::string body;
  for (std::size_t i = begin; i < end; ++i) {
    if (i > begin) body += '\n';
    body.append(lines[i]);
  }
  body = remove_paratext(std::move(body));

  bool pending_blank = false;
  for (auto line : split_lines(body)) {
    while (!line.empty() && (line.back() == ' ' || line.back() == '\t')) line.remove_suffix(1);
    if (line.empty()) {
      pending_blank = true;
      continue;
    }
    if (pending_blank && !result.text.empty()) result.text += '\n';
    pending_blank = false;
    result.text.append(line);
    result.text += '\n';
  }
  if (result.text.empty()) throw InputError("document is empty after cleaning");
  return result;
}

}  // namespace

// Removing a bracketed block can splice a marker line back together, so the
// single pass is repeated until it no longer changes the text. Every
// non-trivial pass shortens it.
CleanResult clean_document(std::string_view raw) {
  CleanResult result = clean_once(raw);
  while (true) {
    auto again = clean_once(result.text);
    if (again.text == result.text) return result;
    result.text = std::move(again.text);
  }
}

std::size_t word_count(std::string_view sentence) {
  std::size_t count = 0;
  bool in_word = false;
  for (char c : sentence) {
    const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
    if (!space && !in_word) ++count;
    in_word = !space;
  }
  return count;
}

std::vector<SentenceRecord> split_sentences(const Document& doc, const SentenceBand& band) {
  std::vector<SentenceRecord> out;
  std::string para;
  auto flush = [&] {
    split_paragraph(para, doc, band, out);
    para.clear();
  };
  for (auto line : split_lines(doc.text)) {
    if (word_count(line) == 0) {
      flush();
      continue;
    }
    for (char c : line) {
      const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
      if (space) {
        if (!para.empty() && para.back() != ' ') para += ' ';
      } else {
        para += c;
      }
    }
    if (!para.empty() && para.back() != ' ') para += ' ';
  }
  flush();
  for (auto& r : out) {
    while (!r.text.empty() && r.text.back() == ' ') r.text.pop_back();
  }
  return out;
}

std::vector<ManifestEntry> load_manifest(const std::string& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path + ": " + e.what());
  }
  if (!doc.is_array()) throw InputError(path + ": manifest must be a JSON array");
  std::vector<ManifestEntry> out;
  std::set<std::string> seen;
  for (const auto& item : doc) {
    ManifestEntry e;
    try {
      e.id = item.at("id").get<std::string>();
      e.filename = item.at("filename").get<std::string>();
      e.title = item.value("title", "");
      e.author = item.value("author", "");
      const auto split = item.value("split", "train");
      if (split == "train") {
        e.role = SplitRole::kTrain;
      } else if (split == "eval") {
        e.role = SplitRole::kEval;
      } else {
        throw InputError(path + ": unknown split role '" + split + "' for " + e.id);
      }
    } catch (const nlohmann::json::exception& ex) {
      throw InputError(path + ": " + ex.what());
    }
    if (!seen.insert(e.id).second) throw InputError(path + ": duplicate document id " + e.id);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Document> load_corpus(const std::string& dir, const std::vector<ManifestEntry>& manifest,
                                  std::vector<std::string>* warnings) {
  const auto n = static_cast<std::int64_t>(manifest.size());
  std::vector<Document> docs(manifest.size());
  std::vector<std::vector<std::string>> doc_warnings(manifest.size());
  std::vector<std::exception_ptr> errors(manifest.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) {
    try {
      const auto& e = manifest[i];
      auto cleaned = clean_document(read_file_text(dir + "/" + e.filename));
      docs[i] = Document{e.id, e.title, e.author, std::move(cleaned.text), e.role};
      doc_warnings[i] = std::move(cleaned.warnings);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const Error& e) {
      throw InputError(manifest[i].id + ": " + e.what());
    }
  }
  if (warnings) {
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      for (const auto& w : doc_warnings[i]) warnings->push_back(manifest[i].id + ": " + w);
    }
  }
  std::sort(docs.begin(), docs.end(), [](const Document& a, const Document& b) { return a.id < b.id; });
  return docs;
}

TokenStreams build_token_stream(const std::vector<Document>& docs, const BpeVocab& vocab,
                                double split_ratio) {
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) {
    throw ConfigError("split ratio must lie in (0, 1), got " + std::to_string(split_ratio));
  }
  if (docs.size() < 2) {
    throw ConfigError("need at least two documents for a document-level train/validation split, got " +
                      std::to_string(docs.size()));
  }
  const auto n = static_cast<std::int64_t>(docs.size());
  std::vector<std::vector<std::int32_t>> encoded(docs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) encoded[i] = encode(docs[i].text, vocab);

  double total = 0;
  for (const auto& e : encoded) total += static_cast<double>(e.size());
  std::size_t best = 1;
  double best_gap = 2.0, cum = 0;
  for (std::size_t b = 1; b < docs.size(); ++b) {
    cum += static_cast<double>(encoded[b - 1].size());
    const double gap = std::abs(cum / total - split_ratio);
    if (gap < best_gap - 1e-12) {
      best_gap = gap;
      best = b;
    }
  }
  const std::int32_t eot = vocab.eot_id();
  TokenStreams out;
  out.train_documents = best;
  out.validation_documents = docs.size() - best;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    auto& dst = i < best ? out.train : out.validation;
    if (i != 0 && i != best) dst.push_back(eot);
    dst.insert(dst.end(), encoded[i].begin(), encoded[i].end());
  }
  return out;
}

std::vector<std::int32_t> concat_documents(const std::vector<Document>& docs, const BpeVocab& vocab) {
  std::vector<std::int32_t> out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (i) out.push_back(vocab.eot_id());
    const auto ids = encode(docs[i].text, vocab);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

void write_token_stream(const std::string& path, const std::vector<std::int32_t>& ids) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw InputError("cannot open " + path + " for writing");
  BinaryWriter w(file);
  w.bytes(kStreamMagic, 4);
  w.u32(kStreamVersion);
  w.u64(ids.size());
  for (auto id : ids) w.u32(static_cast<std::uint32_t>(id));
  if (!file) throw InputError("failed writing " + path);
}

std::vector<std::int32_t> read_token_stream(const std::string& path) {
  const auto image = read_file_bytes(path);
  BinaryReader r(image);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (!std::equal(magic, magic + 4, kStreamMagic)) throw FormatError(path + ": not a token stream", 0);
  const auto version_at = r.offset();
  if (r.u32("version") != kStreamVersion) {
    throw FormatError(path + ": unsupported token stream version", version_at);
  }
  const auto count = r.u64("token count");
  if (count * 4 != r.remaining()) {
    throw FormatError(path + ": token count disagrees with file size", r.offset());
  }
  std::vector<std::int32_t> ids(count);
  r.bytes(ids.data(), count * 4, "token ids");
  return ids;
}

void write_sentences(const std::string& path, const std::vector<SentenceRecord>& records) {
  std::ostringstream out;
  for (const auto& r : records) {
    nlohmann::json j{{"doc_id", r.doc_id},
                     {"index", r.index},
                     {"text", r.text},
                     {"word_count", r.word_count},
                     {"admitted", r.admitted}};
    out << j.dump() << '\n';
  }
  write_file_text(path, out.str());
}

std::vector<SentenceRecord> read_sentences(const std::string& path) {
  std::istringstream in(read_file_text(path));
  std::vector<SentenceRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SentenceRecord r;
      r.doc_id = j.at("doc_id").get<std::string>();
      r.index = j.at("index").get<std::size_t>();
      r.text = j.at("text").get<std::string>();
      r.word_count = j.at("word_count").get<std::size_t>();
      r.admitted = j.at("admitted").get<bool>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path + ": " + e.what(), line_no);
    }
  }
  return out;
}

}  // namespace cprobe
