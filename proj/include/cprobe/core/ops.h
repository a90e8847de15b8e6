#pragma once

// Differentiable tensor operations. Every function here records a backward
// closure when grad mode is on and at least one input requires a gradient.
// Shapes are row-major; "rows" means the product of all but the last axis.

#include <cstdint>
#include <span>

#include "cprobe/core/rng.h"
#include "cprobe/core/tensor.h"

namespace cprobe {

// [m×k]·[k×n] -> [m×n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Elementwise, identical shapes.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

// x[...×n] + bias[n], broadcast over rows.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

// x·w + b for x[m×k], w[k×n], b[n].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// (x - mean)/sqrt(var + eps)·gain + bias over the last axis, var with 1/d.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

// tanh approximation used by GPT-2.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

// Inverted dropout: zero with probability p and scale survivors by 1/(1-p)
// when training; identity otherwise.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training);

// Gathers rows of table[V×d] -> [n×d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids);

// Row-wise softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

// Causal scaled dot-product attention. q, k, v are [(batch·seq_len)×d];
// rows are grouped into consecutive sequences of seq_len. When `probs` is
// non-null it receives the attention weights [batch×heads×seq_len×seq_len].
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::size_t seq_len, std::size_t heads, Tensor<T>* probs = nullptr);

template <typename T>
struct AttentionParams {
  Tensor<T> w_query, b_query;
  Tensor<T> w_key, b_key;
  Tensor<T> w_value, b_value;
  Tensor<T> w_out, b_out;
};

// Full multi-head self-attention block: projections, causal attention over
// each head, concatenation and output projection.
template <typename T>
Tensor<T> causal_self_attention(const Tensor<T>& x, const AttentionParams<T>& params,
                                std::size_t heads, std::size_t seq_len,
                                Tensor<T>* probs = nullptr);

// Mean over rows of -log softmax(logits)[target].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets);

// Mean of squared elementwise differences.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& prediction, const Tensor<T>& target);

// Keeps the k largest entries of every row (lowest index wins ties) and
// zeroes the rest. Gradient flows through retained slots only.
template <typename T>
Tensor<T> top_k_mask(const Tensor<T>& x, std::size_t k);

}  // namespace cprobe
