#include "cprobe/core/ops.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cprobe/core/errors.h"
#include "cprobe/core/kernels.h"

namespace cprobe {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<typename Tensor<T>::Node>;

template <typename T>
using BackwardFn = std::function<void(typename Tensor<T>::Node&)>;

// Wraps freshly computed values into a tensor, attaching `backward` when any
// input participates in differentiation.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs, BackwardFn<T> backward) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor<T>* in : inputs) any = any || in->requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const Tensor<T>* in : inputs) node.parents.push_back(in->node());
  node.backward = std::move(backward);
  return out;
}

// Gradient buffer of an input, or nullptr when it does not need one.
template <typename T>
T* grad_of(const NodePtr<T>& node) {
  return node->requires_grad ? node->grad_buffer().data() : nullptr;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

template <typename T>
void require_matrix(const Tensor<T>& a, const char* op) {
  if (a.ndim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<T> out(m * n);
  kernels::omp::matmul_nn(m, k, n, a.data().data(), b.data().data(), out.data(), false);
  auto an = a.node(), bn = b.node();
  return make_result<T>({m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](auto& self) {
    const T* dc = self.grad.data();
    if (T* da = grad_of<T>(an)) kernels::omp::matmul_nt(m, n, k, dc, bn->data.data(), da, true);
    if (T* db = grad_of<T>(bn)) kernels::omp::matmul_tn(k, m, n, an->data.data(), dc, db, true);
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](auto& self) {
    for (const auto& in : {an, bn}) {
      if (T* g = grad_of<T>(in))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](auto& self) {
    if (T* g = grad_of<T>(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (T* g = grad_of<T>(bn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](auto& self) {
    if (T* g = grad_of<T>(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bn->data[i];
    if (T* g = grad_of<T>(bn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * an->data[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, [xn, factor](auto& self) {
    T* g = grad_of<T>(xn);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t n = x.cols(), rows = x.rows();
  if (bias.numel() != n) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " vs input " +
                         shape_string(x.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  const T* b = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += b[j];
  auto xn = x.node(), bn = bias.node();
  return make_result<T>(x.shape(), std::move(out), {&x, &bias}, [xn, bn, rows, n](auto& self) {
    if (T* g = grad_of<T>(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (T* g = grad_of<T>(bn))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  auto xn = x.node();
  return make_result<T>({1}, {s}, {&x}, [xn](auto& self) {
    T* g = grad_of<T>(xn);
    for (std::size_t i = 0; i < xn->data.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto xn = x.node();
  return make_result<T>(std::move(shape), std::move(out), {&x}, [xn](auto& self) {
    T* g = grad_of<T>(xn);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t d = x.cols(), rows = x.rows();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                         shape_string(bias.shape()) + " do not match last axis of " +
                         shape_string(x.shape()));
  }
  if (!(eps >= 0)) throw ConfigError("layer_norm: eps must be non-negative");
  std::vector<T> out(x.numel()), mean(rows), rstd(rows);
  kernels::omp::layer_norm(rows, d, x.data().data(), gain.data().data(), bias.data().data(), eps,
                           out.data(), mean.data(), rstd.data());
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return make_result<T>(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [xn, gn, bn, rows, d, mean = std::move(mean), rstd = std::move(rstd)](auto& self) {
        const T* dy = self.grad.data();
        const T* xv = xn->data.data();
        const T* gv = gn->data.data();
        T* dx = grad_of<T>(xn);
        T* dg = grad_of<T>(gn);
        T* db = grad_of<T>(bn);
        std::vector<T> xhat(d), dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dyr = dy + r * d;
          T sum_dxhat = 0, sum_dxhat_xhat = 0;
          for (std::size_t i = 0; i < d; ++i) {
            xhat[i] = (xv[r * d + i] - mean[r]) * rstd[r];
            dxhat[i] = dyr[i] * gv[i];
            sum_dxhat += dxhat[i];
            sum_dxhat_xhat += dxhat[i] * xhat[i];
            if (dg) dg[i] += dyr[i] * xhat[i];
            if (db) db[i] += dyr[i];
          }
          if (dx) {
            const T inv_d = T(1) / static_cast<T>(d);
            for (std::size_t i = 0; i < d; ++i) {
              dx[r * d + i] += rstd[r] * (dxhat[i] - inv_d * sum_dxhat -
                                          xhat[i] * inv_d * sum_dxhat_xhat);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  std::vector<T> out(x.numel());
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xv[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, [xn](auto& self) {
    T* g = grad_of<T>(xn);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = xn->data[i];
      const T th = std::tanh(kC * (v + kA * v * v * v));
      const T dinner = kC * (T(1) + T(3) * kA * v * v);
      const T deriv = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * dinner;
      g[i] += self.grad[i] * deriv;
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(T(0), x.data()[i]);
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, [xn](auto& self) {
    T* g = grad_of<T>(xn);
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (xn->data[i] > T(0)) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: rate must be in [0, 1)");
  if (!training || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < p ? T(0) : keep_scale;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, [xn, mask = std::move(mask)](auto& self) {
    T* g = grad_of<T>(xn);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  std::vector<T> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[r]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    std::copy_n(table.data().data() + ids[r] * d, d, out.data() + r * d);
  }
  auto tn = table.node();
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return make_result<T>({ids.size(), d}, std::move(out), {&table},
                        [tn, d, saved = std::move(saved)](auto& self) {
                          T* g = grad_of<T>(tn);
                          for (std::size_t r = 0; r < saved.size(); ++r)
                            for (std::size_t j = 0; j < d; ++j)
                              g[saved[r] * d + j] += self.grad[r * d + j];
                        });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t n = x.cols(), rows = x.rows();
  std::vector<T> out(x.numel());
  kernels::omp::softmax_rows(rows, n, x.data().data(), out.data());
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, [xn, rows, n](auto& self) {
    T* g = grad_of<T>(xn);
    const T* y = self.data.data();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += self.grad[r * n + i] * y[r * n + i];
      for (std::size_t i = 0; i < n; ++i)
        g[r * n + i] += y[r * n + i] * (self.grad[r * n + i] - dot);
    }
  });
}

template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::size_t seq_len, std::size_t heads, Tensor<T>* probs) {
  require_matrix(q, "causal_attention");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t d = q.dim(1);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("causal_attention: width " + std::to_string(d) +
                      " is not divisible by head count " + std::to_string(heads));
  }
  if (seq_len == 0 || q.dim(0) % seq_len != 0) {
    throw DimensionError("causal_attention: " + std::to_string(q.dim(0)) +
                         " rows do not split into sequences of " + std::to_string(seq_len));
  }
  const std::size_t batch = q.dim(0) / seq_len;
  std::vector<T> out(q.numel());
  auto weights = std::make_shared<std::vector<T>>(batch * heads * seq_len * seq_len);
  kernels::attention_forward(batch, seq_len, d, heads, q.data().data(), k.data().data(),
                             v.data().data(), out.data(), weights->data());
  if (probs) *probs = Tensor<T>({batch, heads, seq_len, seq_len}, *weights, false);
  auto qn = q.node(), kn = k.node(), vn = v.node();
  return make_result<T>(
      q.shape(), std::move(out), {&q, &k, &v},
      [qn, kn, vn, weights, batch, seq_len, d, heads](auto& self) {
        // Accumulate into scratch so inputs without grads need no buffer.
        std::vector<T> dq(qn->data.size()), dk(dq.size()), dv(dq.size());
        kernels::attention_backward(batch, seq_len, d, heads, qn->data.data(), kn->data.data(),
                                    vn->data.data(), weights->data(), self.grad.data(),
                                    dq.data(), dk.data(), dv.data());
        auto flush = [](const auto& node, const std::vector<T>& src) {
          if (T* g = grad_of<T>(node))
            for (std::size_t i = 0; i < src.size(); ++i) g[i] += src[i];
        };
        flush(qn, dq);
        flush(kn, dk);
        flush(vn, dv);
      });
}

template <typename T>
Tensor<T> causal_self_attention(const Tensor<T>& x, const AttentionParams<T>& params,
                                std::size_t heads, std::size_t seq_len, Tensor<T>* probs) {
  const std::size_t d = x.cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("causal_self_attention: width " + std::to_string(d) +
                      " is not divisible by head count " + std::to_string(heads));
  }
  auto q = linear(x, params.w_query, params.b_query);
  auto k = linear(x, params.w_key, params.b_key);
  auto v = linear(x, params.w_value, params.b_value);
  auto ctx = causal_attention(q, k, v, seq_len, heads, probs);
  return linear(ctx, params.w_out, params.b_out);
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  require_matrix(logits, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(n) + " rows");
  }
  for (std::int32_t t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  kernels::omp::softmax_rows(n, classes, logits.data().data(), probs->data());
  // Per-row losses from log-sum-exp, summed in row order.
  std::vector<T> row_loss(n);
  const T* lv = logits.data().data();
#pragma omp parallel for schedule(static) if (n * classes >= kernels::kParallelGrain)
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = lv + r * classes;
    const T mx = *std::max_element(row, row + classes);
    T s = 0;
    for (std::size_t i = 0; i < classes; ++i) s += std::exp(row[i] - mx);
    row_loss[r] = std::log(s) + mx - row[targets[r]];
  }
  T total = 0;
  for (T l : row_loss) total += l;
  auto ln = logits.node();
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return make_result<T>({1}, {total / static_cast<T>(n)}, {&logits},
                        [ln, probs, n, classes, saved = std::move(saved)](auto& self) {
                          T* g = grad_of<T>(ln);
                          const T up = self.grad[0] / static_cast<T>(n);
                          for (std::size_t r = 0; r < n; ++r) {
                            for (std::size_t i = 0; i < classes; ++i)
                              g[r * classes + i] += up * (*probs)[r * classes + i];
                            g[r * classes + saved[r]] -= up;
                          }
                        });
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& prediction, const Tensor<T>& target) {
  require_same_shape(prediction, target, "mse_loss");
  const std::size_t n = prediction.numel();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T e = prediction.data()[i] - target.data()[i];
    s += e * e;
  }
  auto pn = prediction.node(), tn = target.node();
  return make_result<T>({1}, {s / static_cast<T>(n)}, {&prediction, &target},
                        [pn, tn, n](auto& self) {
                          const T c = T(2) * self.grad[0] / static_cast<T>(n);
                          T* gp = grad_of<T>(pn);
                          T* gt = grad_of<T>(tn);
                          for (std::size_t i = 0; i < n; ++i) {
                            const T e = pn->data[i] - tn->data[i];
                            if (gp) gp[i] += c * e;
                            if (gt) gt[i] -= c * e;
                          }
                        });
}

template <typename T>
Tensor<T> top_k_mask(const Tensor<T>& x, std::size_t k) {
  const std::size_t h = x.cols(), rows = x.rows();
  if (k < 1 || k > h) {
    throw ConfigError("top_k_mask: k=" + std::to_string(k) + " outside [1, " + std::to_string(h) +
                      "]");
  }
  std::vector<T> out(x.numel(), T(0));
  auto keep = std::make_shared<std::vector<std::uint32_t>>(rows * k);
  const T* xv = x.data().data();
#pragma omp parallel for schedule(static) if (rows * h >= kernels::kParallelGrain)
  for (std::size_t r = 0; r < rows; ++r) {
    auto idx = kernels::omp::top_k_indices(std::span<const T>(xv + r * h, h), k);
    for (std::size_t j = 0; j < k; ++j) {
      (*keep)[r * k + j] = static_cast<std::uint32_t>(idx[j]);
      out[r * h + idx[j]] = xv[r * h + idx[j]];
    }
  }
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, [xn, keep, rows, h, k](auto& self) {
    T* g = grad_of<T>(xn);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t i = r * h + (*keep)[r * k + j];
        g[i] += self.grad[i];
      }
  });
}

#define CPROBE_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> gelu(const Tensor<T>&);                                                   \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&, bool);                            \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>);               \
  template Tensor<T> softmax(const Tensor<T>&);                                                \
  template Tensor<T> causal_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                      std::size_t, std::size_t, Tensor<T>*);                   \
  template Tensor<T> causal_self_attention(const Tensor<T>&, const AttentionParams<T>&,        \
                                           std::size_t, std::size_t, Tensor<T>*);              \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const std::int32_t>);   \
  template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> top_k_mask(const Tensor<T>&, std::size_t);

CPROBE_INSTANTIATE_OPS(float)
CPROBE_INSTANTIATE_OPS(double)

#undef CPROBE_INSTANTIATE_OPS

}  // namespace cprobe
