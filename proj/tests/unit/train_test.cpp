#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "cprobe/core/errors.h"
#include "cprobe/gpt/train.h"
#include "toy_assets.h"

namespace cprobe {
namespace {

namespace fs = std::filesystem;

GptConfig small_config(std::size_t vocab = 1000) {
  GptConfig c;
  c.vocab_size = vocab;
  c.embed_dim = 64;
  c.layers = 2;
  c.heads = 4;
  c.dropout = 0.0;
  c.context_length = 32;
  c.seed = 7;
  return c;
}

std::vector<std::int32_t> repeated_sentence(std::size_t copies) {
  const auto one = encode("The girl walked home alone, and her sister followed her.", testing::toy_vocab());
  std::vector<std::int32_t> out;
  for (std::size_t i = 0; i < copies; ++i) {
    out.insert(out.end(), one.begin(), one.end());
    out.push_back(testing::toy_vocab().eot_id());
  }
  return out;
}

TrainRunConfig quick_run(std::size_t steps) {
  TrainRunConfig r;
  r.lr = 3e-3;
  r.weight_decay = 0.0;
  r.batch_size = 4;
  r.steps = steps;
  r.eval_interval = 10;
  r.eval_windows = 4;
  r.seed = 5;
  return r;
}

TEST(TrainLm, ZeroStepsLeavesModelUnchanged) {
  GptModel m(small_config());
  const auto before = m.clone();
  const auto ids = repeated_sentence(4);
  const auto result = train_lm(m, ids, ids, quick_run(0));
  EXPECT_TRUE(result.log.empty());
  const auto a = m.parameters(), b = before.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(std::equal(a[i].data().begin(), a[i].data().end(), b[i].data().begin()));
  }
}

TEST(TrainLm, MemorizesOneSentence) {
  GptModel m(small_config());
  const auto ids = repeated_sentence(12);
  const auto result = train_lm(m, ids, {}, quick_run(200));
  ASSERT_FALSE(result.log.empty());
  EXPECT_LT(result.step_losses.back(), 0.5);
  EXPECT_LT(perplexity(m, ids), 1.7);
}

TEST(TrainLm, LossTrajectoryIsBitwiseReproducible) {
  const auto ids = repeated_sentence(8);
  GptConfig c = small_config();
  c.dropout = 0.2;
  GptModel a(c), b(c);
  const auto ra = train_lm(a, ids, ids, quick_run(20));
  const auto rb = train_lm(b, ids, ids, quick_run(20));
  EXPECT_EQ(ra.step_losses, rb.step_losses);
  ASSERT_EQ(ra.log.size(), rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) EXPECT_EQ(ra.log[i].val_loss, rb.log[i].val_loss);
}

TEST(TrainLm, SmoothedLossDecreasesEarly) {
  GptModel m(small_config());
  const auto ids = repeated_sentence(12);
  const auto result = train_lm(m, ids, {}, quick_run(60));
  std::vector<double> avg;
  for (std::size_t i = 10; i <= result.step_losses.size(); ++i) {
    double s = 0;
    for (std::size_t j = i - 10; j < i; ++j) s += result.step_losses[j];
    avg.push_back(s / 10);
  }
  for (std::size_t i = 1; i < avg.size(); ++i) EXPECT_LT(avg[i], avg[i - 1]) << "window ending at " << i + 10;
}

TEST(TrainLm, BestCheckpointHasMinimumValidationLoss) {
  const auto dir = fs::temp_directory_path() / "cprobe_train_test";
  fs::remove_all(dir);
  GptModel m(small_config());
  const auto train = repeated_sentence(10);
  std::vector<std::int32_t> val;
  for (int i = 0; i < 4; ++i) {
    const auto s = encode("Her sister walked home alone, and the girl followed.", testing::toy_vocab());
    val.insert(val.end(), s.begin(), s.end());
  }
  auto run = quick_run(40);
  run.checkpoint_dir = dir.string();
  const auto result = train_lm(m, train, val, run);
  double lowest = INFINITY;
  std::size_t lowest_step = 0;
  for (const auto& r : result.log) {
    ASSERT_TRUE(r.val_loss.has_value());
    if (*r.val_loss < lowest) {
      lowest = *r.val_loss;
      lowest_step = r.step;
    }
  }
  EXPECT_EQ(*result.best_val_loss, lowest);
  EXPECT_EQ(result.best_step, lowest_step);
  EXPECT_EQ(load_model((dir / "best.ckpt").string()).config(), m.config());
  EXPECT_TRUE(fs::exists(dir / "last.ckpt"));
  fs::remove_all(dir);
}

TEST(TrainLm, ShortStreamIsAnInputError) {
  GptModel m(small_config());
  const std::vector<std::int32_t> one{5};
  EXPECT_THROW(train_lm(m, one, {}, quick_run(1)), InputError);
}

TEST(TrainLm, DivergenceIsReported) {
  GptModel m(small_config());
  m.weights().head_b.data()[0] = NAN;
  const auto ids = repeated_sentence(3);
  EXPECT_THROW(train_lm(m, ids, {}, quick_run(3)), DivergenceError);
}

GptModel uniform_model(std::size_t vocab) {
  GptModel m(small_config(vocab));
  for (auto& t : m.parameters()) std::fill(t.data().begin(), t.data().end(), 0.0f);
  return m;
}

TEST(Perplexity, UniformPredictorEqualsVocabSize) {
  const auto m = uniform_model(1000);
  const auto ids = repeated_sentence(3);
  EXPECT_NEAR(perplexity(m, ids), 1000.0, 1.0);
}

TEST(Perplexity, EqualsExpOfDirectTokenNll) {
  GptModel m(small_config());
  const auto ids = repeated_sentence(5);  // longer than one context window
  ASSERT_GT(ids.size(), 70u);
  double total = 0;
  std::size_t count = 0;
  NoGradGuard no_grad;
  for (std::size_t begin = 0; begin + 1 < ids.size(); begin += 32) {
    const std::size_t end = std::min(begin + 32, ids.size() - 1);
    const std::vector<std::int32_t> window(ids.begin() + begin, ids.begin() + end);
    const auto logits = m.forward(window);
    for (std::size_t r = 0; r < window.size(); ++r) {
      const auto row = logits.data().subspan(r * 1000, 1000);
      double z = 0;
      for (float x : row) z += std::exp(static_cast<double>(x));
      total += std::log(z) - row[ids[begin + r + 1]];
      ++count;
    }
  }
  EXPECT_EQ(count, ids.size() - 1);
  EXPECT_NEAR(perplexity(m, ids), std::exp(total / count), 1e-6 * std::exp(total / count));
}

TEST(Perplexity, StrideScoresEveryTargetOnce) {
  // A context-free predictor makes every target cost the same, so any
  // double-counted or skipped target would not change the mean; a per-token
  // bias on one id does.
  auto m = uniform_model(1000);
  const auto ids = repeated_sentence(3);
  m.weights().head_b.data()[ids[5]] = 3.0f;
  const double full = mean_nll(m, ids, 32);
  EXPECT_NEAR(mean_nll(m, ids, 8), full, 1e-12);
  EXPECT_NEAR(mean_nll(m, ids, 1), full, 1e-12);
  EXPECT_THROW(perplexity(m, std::vector<std::int32_t>{1}), InputError);
}

}  // namespace
}  // namespace cprobe
