#pragma once

// Dense row-major compute kernels.
//
// Two implementations live side by side:
//   kernels::serial  plain loop nests, the reference the tests compare against
//   kernels::omp     the production versions, parallelized with OpenMP
//
// The OpenMP kernels partition work so that every output element is produced
// by exactly one thread with a fixed reduction order; their results are
// therefore bitwise independent of the thread count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace cprobe::kernels {

// Work below this many multiply-adds stays on the calling thread.
inline constexpr std::size_t kParallelGrain = 1 << 15;

namespace serial {

// C[m×n] (+)= A[m×k] · B[k×n]
template <typename T>
void matmul_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c,
               bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T sum = accumulate ? c[i * n + j] : T(0);
      for (std::size_t p = 0; p < k; ++p) sum += a[i * k + p] * b[p * n + j];
      c[i * n + j] = sum;
    }
  }
}

// C[m×n] (+)= A[m×k] · B[n×k]ᵀ
template <typename T>
void matmul_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c,
               bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T sum = accumulate ? c[i * n + j] : T(0);
      for (std::size_t p = 0; p < k; ++p) sum += a[i * k + p] * b[j * k + p];
      c[i * n + j] = sum;
    }
  }
}

// C[m×n] (+)= A[k×m]ᵀ · B[k×n]
template <typename T>
void matmul_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c,
               bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T sum = accumulate ? c[i * n + j] : T(0);
      for (std::size_t p = 0; p < k; ++p) sum += a[p * m + i] * b[p * n + j];
      c[i * n + j] = sum;
    }
  }
}

// Row-wise layer normalization. mean/rstd receive per-row statistics.
template <typename T>
void layer_norm(std::size_t rows, std::size_t d, const T* x, const T* gain, const T* bias, T eps,
                T* y, T* mean, T* rstd) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * d;
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) y[r * d + i] = (xr[i] - mu) * rs * gain[i] + bias[i];
    mean[r] = mu;
    rstd[r] = rs;
  }
}

template <typename T>
void softmax_rows(std::size_t rows, std::size_t n, const T* x, T* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[r * n + i]);
    T sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      y[r * n + i] = std::exp(x[r * n + i] - mx);
      sum += y[r * n + i];
    }
    for (std::size_t i = 0; i < n; ++i) y[r * n + i] /= sum;
  }
}

// Indices of the k largest entries of `row`, ties resolved toward the lower
// index, returned in ascending index order. Sort-and-cut formulation.
template <typename T>
std::vector<std::size_t> top_k_indices(std::span<const T> row, std::size_t k) {
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace serial

namespace omp {

template <typename T>
void matmul_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c,
               bool accumulate) {
  const bool par = m * k * n >= kParallelGrain && m > 1;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, T(0));
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
    for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
      const std::size_t r1 = std::min(rows, r0 + kBlock), c1 = std::min(cols, c0 + kBlock);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
    }
  }
}

template <typename T>
void matmul_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c,
               bool accumulate) {
  std::vector<T> bt(k * n);
  transpose(n, k, b, bt.data());
  matmul_nn(m, k, n, a, bt.data(), c, accumulate);
}

template <typename T>
void matmul_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c,
               bool accumulate) {
  std::vector<T> at(m * k);
  transpose(k, m, a, at.data());
  matmul_nn(m, k, n, at.data(), b, c, accumulate);
}

template <typename T>
void layer_norm(std::size_t rows, std::size_t d, const T* x, const T* gain, const T* bias, T eps,
                T* y, T* mean, T* rstd) {
  const bool par = rows * d >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t r = 0; r < rows; ++r) {
    serial::layer_norm<T>(1, d, x + r * d, gain, bias, eps, y + r * d, mean + r, rstd + r);
  }
}

template <typename T>
void softmax_rows(std::size_t rows, std::size_t n, const T* x, T* y) {
  const bool par = rows * n >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t r = 0; r < rows; ++r) serial::softmax_rows<T>(1, n, x + r * n, y + r * n);
}

// Selection-based top-k; same contract as serial::top_k_indices.
template <typename T>
std::vector<std::size_t> top_k_indices(std::span<const T> row, std::size_t k) {
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    return row[a] > row[b] || (row[a] == row[b] && a < b);
  };
  if (k < order.size()) std::nth_element(order.begin(), order.begin() + k, order.end(), before);
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace omp

// Causal multi-head attention over `batch` independent sequences of length t.
// q, k, v, out are [(batch·t) × d]; probs is [batch × heads × t × t] with the
// masked (future) entries left at zero.
template <typename T>
void attention_forward(std::size_t batch, std::size_t t, std::size_t d, std::size_t heads,
                       const T* q, const T* k, const T* v, T* out, T* probs) {
  const std::size_t dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const std::size_t jobs = batch * heads;
  const bool par = jobs > 1 && jobs * t * t * dh >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t job = 0; job < jobs; ++job) {
    const std::size_t b = job / heads, h = job % heads;
    T* p = probs + job * t * t;
    std::fill(p, p + t * t, T(0));
    for (std::size_t i = 0; i < t; ++i) {
      const T* qi = q + (b * t + i) * d + h * dh;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        const T* kj = k + (b * t + j) * d + h * dh;
        T s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        p[i * t + j] = s * scale;
        mx = std::max(mx, p[i * t + j]);
      }
      T sum = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        p[i * t + j] = std::exp(p[i * t + j] - mx);
        sum += p[i * t + j];
      }
      for (std::size_t j = 0; j <= i; ++j) p[i * t + j] /= sum;
      T* oi = out + (b * t + i) * d + h * dh;
      std::fill(oi, oi + dh, T(0));
      for (std::size_t j = 0; j <= i; ++j) {
        const T w = p[i * t + j];
        const T* vj = v + (b * t + j) * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
      }
    }
  }
}

// Gradients of attention_forward; dq, dk, dv are accumulated into.
template <typename T>
void attention_backward(std::size_t batch, std::size_t t, std::size_t d, std::size_t heads,
                        const T* q, const T* k, const T* v, const T* probs, const T* dout, T* dq,
                        T* dk, T* dv) {
  const std::size_t dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const std::size_t jobs = batch * heads;
  const bool par = jobs > 1 && jobs * t * t * dh >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t job = 0; job < jobs; ++job) {
    const std::size_t b = job / heads, h = job % heads;
    const T* p = probs + job * t * t;
    std::vector<T> dp(t);
    for (std::size_t i = 0; i < t; ++i) {
      const T* doi = dout + (b * t + i) * d + h * dh;
      T dot = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        const T* vj = v + (b * t + j) * d + h * dh;
        T s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += doi[c] * vj[c];
        dp[j] = s;
        dot += s * p[i * t + j];
      }
      const T* qi = q + (b * t + i) * d + h * dh;
      T* dqi = dq + (b * t + i) * d + h * dh;
      for (std::size_t j = 0; j <= i; ++j) {
        const T w = p[i * t + j];
        const T ds = w * (dp[j] - dot) * scale;
        const T* kj = k + (b * t + j) * d + h * dh;
        T* dkj = dk + (b * t + j) * d + h * dh;
        T* dvj = dv + (b * t + j) * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) {
          dqi[c] += ds * kj[c];
          dkj[c] += ds * qi[c];
          dvj[c] += w * doi[c];
        }
      }
    }
  }
}

}  // namespace cprobe::kernels
