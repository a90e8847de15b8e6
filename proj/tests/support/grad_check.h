#pragma once

// Central finite-difference oracle for the autograd engine. Test-only.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cprobe/core/ops.h"
#include "cprobe/core/rng.h"
#include "cprobe/core/tensor.h"

namespace cprobe::testing {

using Tensor64 = Tensor<double>;
using ScalarFn = std::function<Tensor64(const std::vector<Tensor64>&)>;

inline Tensor64 random_tensor(Shape shape, Rng& rng, double scale = 1.0,
                              bool requires_grad = true) {
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = rng.normal(0.0, scale);
  return Tensor64(std::move(shape), std::move(data), requires_grad);
}

// Reduces an arbitrary output to a scalar with fixed random weights so that
// every output element contributes a distinct upstream gradient.
inline Tensor64 weighted_sum(const Tensor64& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  auto w = random_tensor(out.shape(), rng, 1.0, false);
  return sum(mul(out, w));
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
};

// ||analytic − numeric|| / max(||analytic||, ||numeric||, floor) per input,
// maximized over inputs. The floor keeps identically-zero gradients (a key
// bias under softmax shift invariance, say) from dividing difference noise
// by zero.
inline constexpr double kNormFloor = 1e-6;

inline GradCheckResult check_gradients(const std::vector<Tensor64>& inputs, const ScalarFn& fn,
                                       double step = 1e-5) {
  for (auto t : inputs) t.zero_grad();
  auto loss = fn(inputs);
  loss.backward();
  GradCheckResult result;
  for (auto t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<double> numeric(t.numel());
    {
      NoGradGuard no_grad;
      auto values = t.data();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double orig = values[i];
        values[i] = orig + step;
        const double up = fn(inputs).item();
        values[i] = orig - step;
        const double down = fn(inputs).item();
        values[i] = orig;
        numeric[i] = (up - down) / (2.0 * step);
      }
    }
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), kNormFloor});
    result.max_relative_error = std::max(result.max_relative_error, std::sqrt(diff) / denom);
    result.checked += numeric.size();
  }
  return result;
}

}  // namespace cprobe::testing
