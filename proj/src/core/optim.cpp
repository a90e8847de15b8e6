#include "cprobe/core/optim.h"

#include <cmath>

#include "cprobe/core/errors.h"

namespace cprobe {

template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, AdamWState<T>& state) {
  if (state.m.empty() && state.v.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adamw_step: optimizer state tracks " + std::to_string(state.m.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel()) {
      throw DimensionError("adamw_step: moment buffer " + std::to_string(i) + " has " +
                           std::to_string(state.m[i].size()) + " entries, parameter has shape " +
                           shape_string(params[i].shape()));
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  const T decay = static_cast<T>(1.0 - state.lr * state.weight_decay);
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T step_size = static_cast<T>(state.lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(state.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].data();
    auto grad = params[i].grad();
    const bool has_grad = params[i].has_grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const T g = has_grad ? grad[j] : T(0);
      m[j] = b1 * m[j] + (T(1) - b1) * g;
      v[j] = b2 * v[j] + (T(1) - b2) * g * g;
      theta[j] *= decay;
      theta[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
    }
  }
}

template void adamw_step(std::vector<Tensor<float>>&, AdamWState<float>&);
template void adamw_step(std::vector<Tensor<double>>&, AdamWState<double>&);

}  // namespace cprobe
