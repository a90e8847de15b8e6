#include "cprobe/core/tensor.h"

#include <gtest/gtest.h>

#include "cprobe/core/errors.h"
#include "cprobe/core/ops.h"

namespace cprobe {
namespace {

TEST(TensorTest, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), DimensionError);
  EXPECT_THROW(Tensor<float>({0, 3}, {}), DimensionError);
  Tensor<float> t({2, 3}, std::vector<float>(6, 1.0f));
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_FALSE(t.has_grad());
}

TEST(TensorTest, BackwardPopulatesEveryReachableGrad) {
  auto a = Tensor<double>::full({2, 2}, 1.0, true);
  auto b = Tensor<double>::full({2, 2}, 2.0, true);
  auto unused_path = Tensor<double>::full({2, 2}, 3.0, true);
  // unused_path only reaches the loss through a zero-weighted branch.
  auto loss = sum(add(mul(a, b), scale(unused_path, 0.0)));
  loss.backward();
  ASSERT_TRUE(a.has_grad());
  ASSERT_TRUE(b.has_grad());
  ASSERT_TRUE(unused_path.has_grad());
  EXPECT_EQ(a.grad().size(), a.numel());
  EXPECT_DOUBLE_EQ(a.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(b.grad()[3], 1.0);
  EXPECT_DOUBLE_EQ(unused_path.grad()[1], 0.0);
}

TEST(TensorTest, GradsAccumulateAcrossSharedUses) {
  auto x = Tensor<double>::full({3}, 2.0, true);
  auto loss = sum(mul(x, x));
  loss.backward();
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 4.0);
}

TEST(TensorTest, NoGradGuardSkipsGraph) {
  auto x = Tensor<float>::full({2}, 1.0f, true);
  {
    NoGradGuard guard;
    auto y = scale(x, 2.0f);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.node()->parents.empty());
  }
  EXPECT_TRUE(scale(x, 2.0f).requires_grad());
}

TEST(TensorTest, BackwardRequiresScalar) {
  auto x = Tensor<float>::full({2}, 1.0f, true);
  EXPECT_THROW(scale(x, 1.0f).backward(), DimensionError);
}

}  // namespace
}  // namespace cprobe
