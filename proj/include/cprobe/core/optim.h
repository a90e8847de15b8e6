#pragma once

#include <cstdint>
#include <vector>

#include "cprobe/core/tensor.h"

namespace cprobe {

// AdamW with decoupled weight decay. Plain Adam is weight_decay == 0.
template <typename T>
struct AdamWState {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 3e-2;
  std::uint64_t step = 0;
  // First/second moments, one buffer per parameter, allocated on first step.
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

// One update of every parameter from its accumulated grad. A parameter
// without a grad is treated as having a zero gradient.
//
//   θ ← θ − lr·wd·θ
//   θ ← θ − lr·m̂/(√v̂ + eps)
template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, AdamWState<T>& state);

template <typename T>
void zero_grads(std::vector<Tensor<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace cprobe
