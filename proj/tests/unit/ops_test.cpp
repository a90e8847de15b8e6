#include "cprobe/core/ops.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cprobe/core/errors.h"
#include "grad_check.h"

namespace cprobe {
namespace {

using testing::check_gradients;
using testing::random_tensor;
using testing::Tensor64;
using testing::weighted_sum;

constexpr double kGradTol = 1e-4;

TEST(MatmulTest, IdentityAndDotProduct) {
  Tensor<float> eye({2, 2}, {1, 0, 0, 1});
  Tensor<float> m({2, 2}, {1, 2, 3, 4});
  auto r = matmul(eye, m);
  EXPECT_EQ(std::vector<float>(r.data().begin(), r.data().end()), (std::vector<float>{1, 2, 3, 4}));

  auto dot = matmul(Tensor<float>({1, 2}, {1, 2}), Tensor<float>({2, 1}, {3, 4}));
  EXPECT_EQ(dot.shape(), (Shape{1, 1}));
  EXPECT_FLOAT_EQ(dot.item(), 11.0f);
}

TEST(MatmulTest, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor<float>::zeros({2, 3}), Tensor<float>::zeros({4, 2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4x2]"), std::string::npos);
  }
}

TEST(MatmulTest, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  std::vector<Tensor64> in{random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)};
  auto r = check_gradients(in, [](const auto& t) { return weighted_sum(matmul(t[0], t[1])); });
  EXPECT_LT(r.max_relative_error, kGradTol);
}

TEST(LayerNormTest, ConstantRowsNormalizeToZero) {
  Tensor<float> x({2, 3}, {5, 5, 5, -1, -1, -1});
  auto y = layer_norm(x, Tensor<float>::full({3}, 1.0f), Tensor<float>::zeros({3}), 1e-5f);
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 0.0f);
}

TEST(LayerNormTest, TwoElementExample) {
  Tensor<double> x({1, 2}, {1, 3});
  auto y = layer_norm(x, Tensor<double>::full({2}, 1.0), Tensor<double>::zeros({2}), 0.0);
  EXPECT_DOUBLE_EQ(y.data()[0], -1.0);
  EXPECT_DOUBLE_EQ(y.data()[1], 1.0);
}

TEST(LayerNormTest, WidthMismatchIsDimensionError) {
  EXPECT_THROW(layer_norm(Tensor<float>::zeros({2, 3}), Tensor<float>::zeros({4}),
                          Tensor<float>::zeros({4}), 1e-5f),
               DimensionError);
}

TEST(LayerNormTest, GradientMatchesFiniteDifferences) {
  Rng rng(12);
  std::vector<Tensor64> in{random_tensor({3, 5}, rng), random_tensor({5}, rng),
                           random_tensor({5}, rng)};
  auto r = check_gradients(
      in, [](const auto& t) { return weighted_sum(layer_norm(t[0], t[1], t[2], 1e-5)); });
  EXPECT_LT(r.max_relative_error, kGradTol);
}

AttentionParams<double> random_attention(std::size_t d, Rng& rng) {
  return {random_tensor({d, d}, rng, 0.5), random_tensor({d}, rng, 0.1),
          random_tensor({d, d}, rng, 0.5), random_tensor({d}, rng, 0.1),
          random_tensor({d, d}, rng, 0.5), random_tensor({d}, rng, 0.1),
          random_tensor({d, d}, rng, 0.5), random_tensor({d}, rng, 0.1)};
}

TEST(AttentionTest, SingleTokenEqualsProjectedValue) {
  Rng rng(13);
  const std::size_t d = 6;
  auto p = random_attention(d, rng);
  auto x = random_tensor({1, d}, rng);
  auto out = causal_self_attention(x, p, 2, 1);
  auto expected = linear(linear(x, p.w_value, p.b_value), p.w_out, p.b_out);
  for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(out.data()[i], expected.data()[i], 1e-12);
}

TEST(AttentionTest, UniformScoresGiveUniformWeights) {
  Rng rng(14);
  const std::size_t t = 5, d = 4;
  auto p = random_attention(d, rng);
  p.w_query = Tensor64::zeros({d, d});
  p.b_query = Tensor64::zeros({d});
  auto x = random_tensor({t, d}, rng);
  Tensor64 probs;
  causal_self_attention(x, p, 2, t, &probs);
  ASSERT_EQ(probs.shape(), (Shape{1, 2, t, t}));
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j) {
        const double w = probs.data()[(h * t + i) * t + j];
        EXPECT_NEAR(w, j <= i ? 1.0 / static_cast<double>(i + 1) : 0.0, 1e-12);
      }
}

TEST(AttentionTest, HeadsMustDivideWidth) {
  Rng rng(15);
  auto p = random_attention(6, rng);
  EXPECT_THROW(causal_self_attention(random_tensor({2, 6}, rng), p, 4, 2), ConfigError);
}

TEST(AttentionTest, GradientMatchesFiniteDifferences) {
  Rng rng(16);
  const std::size_t t = 4, d = 6;
  auto p = random_attention(d, rng);
  std::vector<Tensor64> in{random_tensor({t, d}, rng), p.w_query, p.b_query, p.w_key, p.b_key,
                           p.w_value, p.b_value, p.w_out, p.b_out};
  auto r = check_gradients(in, [](const auto& v) {
    AttentionParams<double> q{v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]};
    return weighted_sum(causal_self_attention(v[0], q, 2, 4));
  });
  EXPECT_LT(r.max_relative_error, kGradTol);
}

TEST(AttentionTest, BatchedSequencesDoNotInteract) {
  Rng rng(17);
  const std::size_t t = 3, d = 4;
  auto p = random_attention(d, rng);
  auto a = random_tensor({t, d}, rng), b = random_tensor({t, d}, rng);
  std::vector<double> both(a.data().begin(), a.data().end());
  both.insert(both.end(), b.data().begin(), b.data().end());
  auto batched = causal_self_attention(Tensor64({2 * t, d}, both), p, 2, t);
  auto single = causal_self_attention(b, p, 2, t);
  for (std::size_t i = 0; i < t * d; ++i)
    EXPECT_NEAR(batched.data()[t * d + i], single.data()[i], 1e-12);
}

TEST(CrossEntropyTest, UniformLogitsGiveLogV) {
  Tensor<double> logits({1, 4}, {0.3, 0.3, 0.3, 0.3});
  std::vector<std::int32_t> target{2};
  EXPECT_NEAR(softmax_cross_entropy(logits, target).item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropyTest, ConfidentPredictionHasTinyLoss) {
  Tensor<double> logits({1, 4}, {20, 0, 0, 0});
  std::vector<std::int32_t> target{0};
  EXPECT_LT(softmax_cross_entropy(logits, target).item(), 1e-6);
}

TEST(CrossEntropyTest, TargetOutOfRangeIsIndexError) {
  std::vector<std::int32_t> target{4};
  EXPECT_THROW(softmax_cross_entropy(Tensor<float>::zeros({1, 4}), target), IndexError);
}

TEST(CrossEntropyTest, GradientIsSoftmaxMinusOneHot) {
  Rng rng(18);
  const std::size_t n = 3, v = 5;
  std::vector<std::int32_t> targets{1, 4, 0};
  auto logits = random_tensor({n, v}, rng);
  auto loss = softmax_cross_entropy(logits, targets);
  loss.backward();
  auto probs = softmax(logits.detach());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < v; ++c) {
      const double expected =
          (probs.data()[r * v + c] - (static_cast<std::int32_t>(c) == targets[r] ? 1.0 : 0.0)) /
          static_cast<double>(n);
      EXPECT_NEAR(logits.grad()[r * v + c], expected, 1e-12);
    }
  std::vector<Tensor64> in{random_tensor({n, v}, rng)};
  auto r = check_gradients(in, [&](const auto& t) { return softmax_cross_entropy(t[0], targets); });
  EXPECT_LT(r.max_relative_error, kGradTol);
}

TEST(SoftmaxTest, RowsAreDistributions) {
  Rng rng(19);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng.below(5), n = 1 + rng.below(30);
    auto x = random_tensor({rows, n}, rng, 10.0, false);
    auto y = softmax(x);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) {
        EXPECT_GE(y.data()[r * n + i], 0.0);
        s += y.data()[r * n + i];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(ElementwiseTest, GradientsMatchFiniteDifferences) {
  Rng rng(20);
  std::vector<Tensor64> in{random_tensor({3, 4}, rng), random_tensor({4}, rng)};
  EXPECT_LT(check_gradients(in, [](const auto& t) { return weighted_sum(gelu(t[0])); })
                .max_relative_error,
            kGradTol);
  EXPECT_LT(check_gradients(in, [](const auto& t) { return weighted_sum(relu(t[0])); })
                .max_relative_error,
            kGradTol);
  EXPECT_LT(check_gradients(in, [](const auto& t) { return weighted_sum(add_bias(t[0], t[1])); })
                .max_relative_error,
            kGradTol);
  EXPECT_LT(check_gradients(in, [](const auto& t) { return weighted_sum(softmax(t[0])); })
                .max_relative_error,
            kGradTol);
  std::vector<Tensor64> pair{random_tensor({2, 5}, rng), random_tensor({2, 5}, rng)};
  EXPECT_LT(check_gradients(pair, [](const auto& t) { return mse_loss(t[0], t[1]); })
                .max_relative_error,
            kGradTol);
}

TEST(EmbeddingTest, GathersRowsAndScattersGradients) {
  Tensor<double> table({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  std::vector<std::int32_t> ids{2, 0, 2};
  auto out = embedding(table, ids);
  EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()),
            (std::vector<double>{5, 6, 1, 2, 5, 6}));
  sum(out).backward();
  EXPECT_EQ(std::vector<double>(table.grad().begin(), table.grad().end()),
            (std::vector<double>{1, 1, 0, 0, 2, 2}));
  std::vector<std::int32_t> bad{3};
  EXPECT_THROW(embedding(table, bad), IndexError);
}

TEST(DropoutTest, EvalIsIdentityAndTrainRescales) {
  Rng rng(21);
  auto x = Tensor<float>::full({1000}, 1.0f);
  auto eval = dropout(x, 0.2, rng, false);
  for (float v : eval.data()) EXPECT_EQ(v, 1.0f);
  auto train = dropout(x, 0.2, rng, true);
  std::size_t zeros = 0;
  for (float v : train.data()) {
    if (v == 0.0f) ++zeros;
    else EXPECT_FLOAT_EQ(v, 1.25f);
  }
  EXPECT_GT(zeros, 120u);
  EXPECT_LT(zeros, 280u);
  EXPECT_THROW(dropout(x, 1.0, rng, true), ConfigError);
}

TEST(TopKTest, Examples) {
  Tensor<float> x({1, 4}, {3, 1, 2, 0});
  auto full = top_k_mask(x, 4);
  EXPECT_EQ(std::vector<float>(full.data().begin(), full.data().end()),
            (std::vector<float>{3, 1, 2, 0}));
  auto two = top_k_mask(x, 2);
  EXPECT_EQ(std::vector<float>(two.data().begin(), two.data().end()),
            (std::vector<float>{3, 0, 2, 0}));
  EXPECT_THROW(top_k_mask(x, 0), ConfigError);
  EXPECT_THROW(top_k_mask(x, 5), ConfigError);
}

TEST(TopKTest, TiesKeepLowerIndex) {
  Tensor<float> x({1, 5}, {1, 2, 2, 2, 0});
  auto y = top_k_mask(x, 2);
  EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()),
            (std::vector<float>{0, 2, 2, 0, 0}));
}

// Sort-and-cut oracle over random tie-heavy inputs.
TEST(TopKTest, MatchesSortOracleAndKeepsExactlyK) {
  Rng rng(22);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t h = 2 + rng.below(30), rows = 1 + rng.below(4);
    const std::size_t k = 1 + rng.below(h);
    std::vector<float> vals(rows * h);
    for (auto& v : vals) v = static_cast<float>(static_cast<int>(rng.below(7)) - 3);
    auto y = top_k_mask(Tensor<float>({rows, h}, vals), k);
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<std::size_t> order(h);
      std::iota(order.begin(), order.end(), 0u);
      std::stable_sort(order.begin(), order.end(),
                       [&](auto a, auto b) { return vals[r * h + a] > vals[r * h + b]; });
      std::vector<bool> keep(h, false);
      for (std::size_t j = 0; j < k; ++j) keep[order[j]] = true;
      float kept_min = INFINITY, dropped_max = -INFINITY;
      for (std::size_t i = 0; i < h; ++i) {
        const float in = vals[r * h + i], out = y.data()[r * h + i];
        EXPECT_EQ(out, keep[i] ? in : 0.0f);
        if (keep[i]) kept_min = std::min(kept_min, in);
        else dropped_max = std::max(dropped_max, in);
      }
      EXPECT_GE(kept_min, dropped_max);
    }
  }
}

TEST(TopKTest, GradientFlowsOnlyThroughRetainedSlots) {
  Tensor<double> x({1, 4}, {0.5, -1.0, 2.0, 0.1}, true);
  sum(top_k_mask(x, 2)).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()),
            (std::vector<double>{1, 0, 1, 0}));
  Rng rng(23);
  std::vector<Tensor64> in{random_tensor({3, 8}, rng)};
  auto r = check_gradients(in, [](const auto& t) { return weighted_sum(top_k_mask(t[0], 3)); });
  EXPECT_LT(r.max_relative_error, kGradTol);
}

}  // namespace
}  // namespace cprobe
