#include "cprobe/core/kernels.h"

#include <gtest/gtest.h>
#include <omp.h>

#include <cmath>
#include <vector>

#include "cprobe/core/rng.h"

namespace cprobe {
namespace {

std::vector<float> random_values(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal(0.0, 1.0));
  return v;
}

void expect_close(const std::vector<float>& a, const std::vector<float>& b, float tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(a[i], b[i], tol * (1.0f + std::fabs(b[i]))) << "at " << i;
  }
}

// Restores the OpenMP thread count after a test changes it.
class ThreadCount {
 public:
  explicit ThreadCount(int n) : saved_(omp_get_max_threads()) { omp_set_num_threads(n); }
  ~ThreadCount() { omp_set_num_threads(saved_); }

 private:
  int saved_;
};

TEST(KernelsTest, MatmulVariantsMatchSerialReference) {
  Rng rng(1);
  const std::size_t m = 37, k = 53, n = 29;
  auto a = random_values(m * k, rng), b = random_values(k * n, rng);
  auto bt = random_values(n * k, rng), at = random_values(k * m, rng);
  std::vector<float> ref(m * n), got(m * n);

  kernels::serial::matmul_nn(m, k, n, a.data(), b.data(), ref.data(), false);
  kernels::omp::matmul_nn(m, k, n, a.data(), b.data(), got.data(), false);
  expect_close(got, ref, 1e-5f);

  kernels::serial::matmul_nt(m, k, n, a.data(), bt.data(), ref.data(), false);
  kernels::omp::matmul_nt(m, k, n, a.data(), bt.data(), got.data(), false);
  expect_close(got, ref, 1e-5f);

  kernels::serial::matmul_tn(m, k, n, at.data(), b.data(), ref.data(), true);
  kernels::omp::matmul_tn(m, k, n, at.data(), b.data(), got.data(), true);
  expect_close(got, ref, 1e-5f);
}

TEST(KernelsTest, ParallelResultsAreBitwiseIndependentOfThreadCount) {
  Rng rng(2);
  const std::size_t m = 128, k = 96, n = 80;
  auto a = random_values(m * k, rng), b = random_values(k * n, rng);
  std::vector<float> one(m * n), many(m * n);
  {
    ThreadCount threads(1);
    kernels::omp::matmul_nn(m, k, n, a.data(), b.data(), one.data(), false);
  }
  {
    ThreadCount threads(4);
    kernels::omp::matmul_nn(m, k, n, a.data(), b.data(), many.data(), false);
  }
  EXPECT_EQ(one, many);

  const std::size_t batch = 3, t = 16, d = 32, heads = 4;
  auto q = random_values(batch * t * d, rng), kk = random_values(q.size(), rng),
       v = random_values(q.size(), rng);
  std::vector<float> out1(q.size()), out4(q.size()), p1(batch * heads * t * t), p4(p1.size());
  {
    ThreadCount threads(1);
    kernels::attention_forward(batch, t, d, heads, q.data(), kk.data(), v.data(), out1.data(),
                               p1.data());
  }
  {
    ThreadCount threads(4);
    kernels::attention_forward(batch, t, d, heads, q.data(), kk.data(), v.data(), out4.data(),
                               p4.data());
  }
  EXPECT_EQ(out1, out4);
  EXPECT_EQ(p1, p4);
}

TEST(KernelsTest, LayerNormAndSoftmaxMatchSerial) {
  Rng rng(3);
  const std::size_t rows = 300, d = 128;
  auto x = random_values(rows * d, rng), g = random_values(d, rng), b = random_values(d, rng);
  std::vector<float> y1(rows * d), y2(rows * d), m1(rows), m2(rows), r1(rows), r2(rows);
  kernels::serial::layer_norm<float>(rows, d, x.data(), g.data(), b.data(), 1e-5f, y1.data(),
                                     m1.data(), r1.data());
  kernels::omp::layer_norm<float>(rows, d, x.data(), g.data(), b.data(), 1e-5f, y2.data(),
                                  m2.data(), r2.data());
  EXPECT_EQ(y1, y2);
  kernels::serial::softmax_rows<float>(rows, d, x.data(), y1.data());
  kernels::omp::softmax_rows<float>(rows, d, x.data(), y2.data());
  EXPECT_EQ(y1, y2);
}

TEST(KernelsTest, TopKSelectionMatchesSortAndCut) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 1 + rng.below(40);
    const std::size_t k = 1 + rng.below(h);
    std::vector<float> row(h);
    // Small integer range forces plenty of ties.
    for (auto& v : row) v = static_cast<float>(rng.below(5));
    EXPECT_EQ(kernels::omp::top_k_indices<float>(row, k),
              kernels::serial::top_k_indices<float>(row, k));
  }
}

}  // namespace
}  // namespace cprobe
