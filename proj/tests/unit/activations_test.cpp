#include <cstring>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "cprobe/activations/activations.h"
#include "cprobe/core/binary_io.h"
#include "cprobe/core/errors.h"
#include "toy_assets.h"

namespace cprobe {
namespace {

namespace fs = std::filesystem;
using testing::toy_vocab;

GptConfig toy_config(std::size_t layers = 3) {
  GptConfig c;
  c.vocab_size = toy_vocab().size();
  c.embed_dim = 16;
  c.layers = layers;
  c.heads = 2;
  c.dropout = 0.2;
  c.context_length = 24;
  c.seed = 21;
  return c;
}

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / "cprobe_activations_test") {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

ActivationSet random_set(std::size_t sentences, std::size_t tokens_each, std::uint32_t dim, std::uint64_t seed) {
  Rng rng(seed);
  ActivationSet s;
  s.layer = 2;
  s.dim = dim;
  s.sources = {"doc-a", "doc-b"};
  for (std::uint32_t i = 0; i < sentences; ++i) {
    for (std::uint32_t t = 0; t < tokens_each; ++t) {
      s.index.push_back({i % 2, i, t});
      for (std::uint32_t j = 0; j < dim; ++j) s.data.push_back(static_cast<float>(rng.normal(0, 1)));
    }
  }
  return s;
}

TEST(Extract, OneSentenceAddsOneRowPerToken) {
  GptModel m(toy_config(8));
  const std::vector<ExtractionItem> items{{"doc", 0, "The girl walked to the church."}};
  const auto tokens = encode(items[0].text, toy_vocab()).size();
  const auto r = extract_activations(m, items, toy_vocab());
  ASSERT_EQ(r.layers.size(), 8u);
  for (std::size_t l = 0; l < 8; ++l) {
    EXPECT_EQ(r.layers[l].rows(), tokens);
    EXPECT_EQ(r.layers[l].layer, l + 1);
    EXPECT_EQ(r.layers[l].index.back().token_position, tokens - 1);
  }
}

TEST(Extract, NoSentencesGiveEmptyValidFiles) {
  TempDir dir;
  GptModel m(toy_config());
  const auto r = extract_activations(m, {}, toy_vocab());
  ASSERT_EQ(r.layers.size(), 3u);
  for (const auto& set : r.layers) {
    EXPECT_EQ(set.rows(), 0u);
    write_activation_file(set, dir.file("empty.bin"));
    EXPECT_EQ(read_activation_file(dir.file("empty.bin")), set);
  }
}

TEST(Extract, RowsEqualForwardTraceBitwise) {
  GptModel m(toy_config());
  const std::vector<ExtractionItem> items{{"a", 3, "Her sister married the vicar."},
                                          {"b", 0, "The heiress had a fortune of her own."}};
  const auto r = extract_activations(m, items, toy_vocab());
  std::size_t row = 0;
  for (const auto& item : items) {
    const auto ids = encode(item.text, toy_vocab());
    HiddenStateTrace trace;
    ForwardOptions opts;
    opts.trace = &trace;
    m.forward(ids, opts);
    for (std::size_t l = 0; l < 3; ++l) {
      const auto want = trace.layers[l].data();
      EXPECT_EQ(std::memcmp(r.layers[l].data.data() + row * 16, want.data(), want.size_bytes()), 0);
    }
    row += ids.size();
  }
  EXPECT_EQ(r.layers[0].rows(), row);
  EXPECT_EQ(r.layers[0].sources, (std::vector<std::string>{"a", "b"}));
}

TEST(Extract, IsDeterministic) {
  GptModel m(toy_config());
  const std::vector<ExtractionItem> items{{"a", 0, "She left the house at dawn."}, {"a", 1, "He stayed."}};
  EXPECT_EQ(extract_activations(m, items, toy_vocab()).layers, extract_activations(m, items, toy_vocab()).layers);
}

TEST(Extract, OverlongSentenceIsSkippedWithWarning) {
  GptModel m(toy_config());
  std::string text;
  for (int i = 0; i < 30; ++i) text += "word ";
  const std::vector<ExtractionItem> items{{"a", 0, text}, {"a", 1, "A short sentence here."}};
  const auto r = extract_activations(m, items, toy_vocab());
  EXPECT_EQ(r.skipped, 1u);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_EQ(r.layers[0].index.front().sentence_index, 1u);
}

TEST(Extract, SentenceItemsKeepAdmittedOnly) {
  std::vector<SentenceRecord> recs(3);
  recs[0].admitted = true;
  recs[1].admitted = false;
  recs[2].admitted = true;
  recs[2].index = 2;
  const auto items = sentence_items(recs);
  ASSERT_EQ(items.size(), 2u);
  EXPECT_EQ(items[1].sentence_index, 2u);
}

TEST(Split, TenSentencesGoNineToOne) {
  const auto set = random_set(10, 3, 4, 1);
  const auto [train, val] = split_activation_set(set, 0.9, 42);
  std::set<std::uint32_t> train_s, val_s;
  for (const auto& r : train.index) train_s.insert(r.sentence_index);
  for (const auto& r : val.index) val_s.insert(r.sentence_index);
  EXPECT_EQ(train_s.size(), 9u);
  EXPECT_EQ(val_s.size(), 1u);
  EXPECT_EQ(train.rows() + val.rows(), set.rows());
  for (auto s : val_s) EXPECT_FALSE(train_s.contains(s));
}

TEST(Split, SentencesNeverStraddleAndSeedReproduces) {
  const auto set = random_set(37, 5, 3, 2);
  const auto a = split_activation_set(set, 0.9, 7);
  const auto b = split_activation_set(set, 0.9, 7);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  std::set<std::uint32_t> train_s;
  for (const auto& r : a.first.index) train_s.insert(r.sentence_index);
  for (const auto& r : a.second.index) EXPECT_FALSE(train_s.contains(r.sentence_index));
  for (std::size_t i = 0; i < a.first.rows(); ++i) {
    // Every row keeps its values.
    const auto ref = a.first.index[i];
    const std::size_t orig = ref.sentence_index * 5 + ref.token_position;
    EXPECT_TRUE(std::equal(a.first.row(i).begin(), a.first.row(i).end(), set.row(orig).begin()));
  }
}

TEST(Split, OneSentenceIsAConfigError) {
  EXPECT_THROW(split_activation_set(random_set(1, 12, 2, 3), 0.9, 1), ConfigError);
}

TEST(ActivationFile, RoundTripIsBitwise) {
  TempDir dir;
  auto set = random_set(6, 4, 7, 4);
  set.source = ActivationSource::kPrompt;
  write_activation_file(set, dir.file("a.bin"));
  EXPECT_EQ(read_activation_file(dir.file("a.bin")), set);
}

TEST(ActivationFile, TruncationMidRowNamesTheRowOffset) {
  TempDir dir;
  const auto set = random_set(3, 2, 4, 5);
  write_activation_file(set, dir.file("a.bin"));
  const auto bytes = read_file_bytes(dir.file("a.bin"));
  const std::size_t header = 16 + 24, row_bytes = 16;
  write_file_text(dir.file("cut.bin"), std::string(bytes.begin(), bytes.begin() + header + 2 * row_bytes + 5));
  try {
    read_activation_file(dir.file("cut.bin"));
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), header + 2 * row_bytes);
  }
}

TEST(ActivationFile, DimLargerThanRowsIsAFormatError) {
  TempDir dir;
  const auto set = random_set(3, 2, 4, 6);
  write_activation_file(set, dir.file("a.bin"));
  auto bytes = read_file_bytes(dir.file("a.bin"));
  const std::uint32_t big = 896;
  std::memcpy(bytes.data() + 20, &big, 4);
  write_file_text(dir.file("dim.bin"), std::string(bytes.begin(), bytes.end()));
  EXPECT_THROW(read_activation_file(dir.file("dim.bin")), FormatError);
  const std::uint32_t slightly = 5;
  std::memcpy(bytes.data() + 20, &slightly, 4);
  write_file_text(dir.file("dim.bin"), std::string(bytes.begin(), bytes.end()));
  EXPECT_THROW(read_activation_file(dir.file("dim.bin")), FormatError);
}

TEST(ActivationFile, BadMagicIsAFormatError) {
  TempDir dir;
  write_activation_file(random_set(2, 2, 2, 7), dir.file("a.bin"));
  auto bytes = read_file_bytes(dir.file("a.bin"));
  bytes[0] = 'X';
  write_file_text(dir.file("bad.bin"), std::string(bytes.begin(), bytes.end()));
  EXPECT_THROW(read_activation_file(dir.file("bad.bin")), FormatError);
}

TEST(ActivationFile, ManifestRoundTrips) {
  TempDir dir;
  const std::vector<ActivationFileEntry> entries{{1, "layer1.bin", 10, 16, "ab"}, {2, "layer2.bin", 10, 16, "cd"}};
  write_activation_manifest(dir.file("m.json"), entries);
  const auto back = read_activation_manifest(dir.file("m.json"));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].file, "layer2.bin");
  EXPECT_EQ(back[0].rows, 10u);
}

}  // namespace
}  // namespace cprobe
