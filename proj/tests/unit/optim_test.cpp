#include "cprobe/core/optim.h"

#include <gtest/gtest.h>

#include "cprobe/core/errors.h"
#include "cprobe/core/ops.h"
#include "cprobe/core/rng.h"

namespace cprobe {
namespace {

std::vector<Tensor<double>> params_with_grad(const std::vector<double>& values, double grad) {
  Tensor<double> p({values.size()}, values, true);
  // Accumulate a known gradient: d/dp sum(grad * p) = grad.
  sum(scale(p, grad)).backward();
  return {p};
}

TEST(AdamWTest, ZeroGradientWithoutDecayIsIdentity) {
  auto params = params_with_grad({1.0, -2.0, 3.5}, 0.0);
  AdamWState<double> state;
  state.weight_decay = 0.0;
  for (int i = 0; i < 5; ++i) adamw_step(params, state);
  EXPECT_EQ(std::vector<double>(params[0].data().begin(), params[0].data().end()),
            (std::vector<double>{1.0, -2.0, 3.5}));
  EXPECT_EQ(state.step, 5u);
}

TEST(AdamWTest, ZeroGradientPureDecay) {
  auto params = params_with_grad({1.0, -2.0, 4.0}, 0.0);
  AdamWState<double> state;
  state.lr = 0.1;
  state.weight_decay = 0.5;
  adamw_step(params, state);
  EXPECT_DOUBLE_EQ(params[0].data()[0], 0.95);
  EXPECT_DOUBLE_EQ(params[0].data()[1], -1.9);
  EXPECT_DOUBLE_EQ(params[0].data()[2], 3.8);
}

TEST(AdamWTest, FirstStepMovesByLearningRate) {
  auto params = params_with_grad({0.0, 1.0, -1.0}, 1.0);
  AdamWState<double> state;
  state.lr = 1e-3;
  state.weight_decay = 0.0;
  adamw_step(params, state);
  // Closed form: m̂ = g, v̂ = g², step = lr·g/(|g| + eps).
  const double expected = 1e-3 * 1.0 / (1.0 + 1e-8);
  EXPECT_NEAR(params[0].data()[0], 0.0 - expected, 1e-15);
  EXPECT_NEAR(params[0].data()[1], 1.0 - expected, 1e-15);
  EXPECT_NEAR(params[0].data()[2], -1.0 - expected, 1e-15);
}

TEST(AdamWTest, MismatchedStateIsDimensionError) {
  auto params = params_with_grad({1.0, 2.0}, 1.0);
  AdamWState<double> state;
  state.m = {std::vector<double>(3)};
  state.v = {std::vector<double>(3)};
  EXPECT_THROW(adamw_step(params, state), DimensionError);
}

TEST(AdamWTest, StepCounterIncrementsByOne) {
  auto params = params_with_grad({1.0}, 0.5);
  AdamWState<double> state;
  for (std::uint64_t i = 1; i <= 3; ++i) {
    adamw_step(params, state);
    EXPECT_EQ(state.step, i);
  }
}

TEST(AdamWTest, MinimizesAQuadratic) {
  Rng rng(5);
  Tensor<double> x({4}, {3.0, -2.0, 1.0, 0.5}, true);
  std::vector<Tensor<double>> params{x};
  AdamWState<double> state;
  state.lr = 0.05;
  state.weight_decay = 0.0;
  for (int i = 0; i < 500; ++i) {
    zero_grads(params);
    sum(mul(x, x)).backward();
    adamw_step(params, state);
  }
  for (double v : x.data()) EXPECT_NEAR(v, 0.0, 1e-2);
}

}  // namespace
}  // namespace cprobe
