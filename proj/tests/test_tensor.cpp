#include <gtest/gtest.h>

#include <cmath>

#include "mosquitonet/tensor.hpp"

using namespace mqnet;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
}

TEST(Tensor, MatmulIdentity) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(a, identity(2)), a);
  EXPECT_EQ(matmul(identity(2), a), a);
}

TEST(Tensor, MatmulHandValues) {
  const Tensor c = matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{5, 6}, {7, 8}}));
  EXPECT_EQ(c, Tensor::matrix({{19, 22}, {43, 50}}));

  const Tensor row = Tensor::matrix({{1, 2, 3}});
  const Tensor col = Tensor::matrix({{4}, {5}, {6}});
  EXPECT_EQ(matmul(row, col), Tensor::matrix({{32}}));
}

TEST(Tensor, MatmulMismatchNamesBothShapes) {
  try {
    (void)matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3] x [2,3]"), std::string::npos) << e.what();
  }
}

TEST(Tensor, MatmulMatchesNaiveOnOddSizes) {
  // Exercises the 4-row register blocking remainder and column blocking.
  for (std::size_t m : {1u, 3u, 5u, 9u}) {
    for (std::size_t n : {1u, 7u, 600u}) {
      const std::size_t k = 131;
      const Tensor a = random_init({m, k}, UniformInit{-1, 1}, RngSeed{m * 31 + n});
      const Tensor b = random_init({k, n}, UniformInit{-1, 1}, RngSeed{m * 17 + n + 5});
      const Tensor c = matmul(a, b);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0;
          for (std::size_t p = 0; p < k; ++p) s += double(a[i * k + p]) * b[p * n + j];
          ASSERT_NEAR(c[i * n + j], s, 1e-4) << m << "x" << n;
        }
      }
    }
  }
}

TEST(Tensor, MatmulAssociatesWithIdentityProperty) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t n = 1 + seed % 7;
    const Tensor a = random_init({n, n}, UniformInit{-5, 5}, RngSeed{seed});
    EXPECT_EQ(matmul(identity(n), a), a);
    EXPECT_EQ(matmul(a, identity(n)), a);
  }
}

TEST(Tensor, Elementwise) {
  EXPECT_EQ(add(Tensor::vector({1, 2}), Tensor::vector({0, 0})), Tensor::vector({1, 2}));
  EXPECT_EQ(mul(Tensor::vector({1, 2, 3}), Tensor::vector({2, 2, 2})), Tensor::vector({2, 4, 6}));
  EXPECT_EQ(scale(Tensor::vector({1, -1}), -1), Tensor::vector({-1, 1}));
  EXPECT_EQ(sub(Tensor::vector({3, 2}), Tensor::vector({1, 2})), Tensor::vector({2, 0}));
  EXPECT_THROW(add(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), ShapeError);
}

TEST(Tensor, Reductions) {
  EXPECT_DOUBLE_EQ(sum(Tensor::vector({1, 2, 3})), 6.0);
  EXPECT_DOUBLE_EQ(mean(Tensor::vector({1, 2, 3})), 2.0);
  EXPECT_EQ(argmax(Tensor::vector({0.1f, 0.9f})), 1u);
  const Tensor flat({5}, 2.5f);
  EXPECT_EQ(max(flat), 2.5f);
  EXPECT_EQ(argmax(flat), 0u);
  EXPECT_THROW(reduce_all(ReduceOp::sum, Tensor()), DomainError);
}

TEST(Tensor, ReduceAlongAxis) {
  const Tensor m = Tensor::matrix({{1, 5, 3}, {4, 2, 6}});
  EXPECT_EQ(reduce(ReduceOp::sum, m, 0), Tensor::vector({5, 7, 9}));
  EXPECT_EQ(reduce(ReduceOp::sum, m, 1), Tensor::vector({9, 12}));
  EXPECT_EQ(reduce(ReduceOp::max, m, 1), Tensor::vector({5, 6}));
  EXPECT_EQ(reduce(ReduceOp::argmax, m, 1), Tensor::vector({1, 2}));
  EXPECT_EQ(reduce(ReduceOp::mean, m, 0), Tensor::vector({2.5f, 3.5f, 4.5f}));
  EXPECT_THROW(reduce(ReduceOp::sum, m, 2), ShapeError);
}

TEST(Tensor, AxisSumThenRemainderEqualsGlobalSum) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor t = random_init({3 + seed % 4, 5, 2 + seed % 3}, UniformInit{-2, 3}, RngSeed{seed});
    const double global = sum(t);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      const double staged = sum(reduce(ReduceOp::sum, t, axis));
      EXPECT_NEAR(staged, global, 1e-4 * std::max(1.0, std::abs(global)));
    }
  }
}

TEST(Tensor, ArgmaxInvariantUnderConstantShift) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Tensor t = random_init({17}, UniformInit{-1, 1}, RngSeed{seed});
    const float shift = static_cast<float>(seed) * 0.37f - 9.0f;
    Tensor shifted = t;
    for (float& v : shifted.values()) v += shift;
    EXPECT_EQ(argmax(t), argmax(shifted));
  }
}

TEST(Tensor, RandomInitDeterministic) {
  const Tensor a = random_init({4, 4}, KaimingFanIn{16}, RngSeed{42});
  const Tensor b = random_init({4, 4}, KaimingFanIn{16}, RngSeed{42});
  const Tensor c = random_init({4, 4}, KaimingFanIn{16}, RngSeed{43});
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(random_init({3, 3}, UniformInit{0, 0}, RngSeed{1}), Tensor({3, 3}));
}

TEST(Tensor, KaimingStatistics) {
  const Tensor t = random_init({1000000}, KaimingFanIn{100}, RngSeed{7});
  const double m = mean(t);
  double var = 0;
  for (float v : t.values()) var += (v - m) * (v - m);
  const double sd = std::sqrt(var / static_cast<double>(t.size()));
  EXPECT_NEAR(sd, std::sqrt(2.0 / 100.0), 0.02 * std::sqrt(2.0 / 100.0));
}

TEST(Tensor, UniformRange) {
  const Tensor t = random_init({10000}, UniformInit{-0.5f, 2.0f}, RngSeed{3});
  for (float v : t.values()) {
    ASSERT_GE(v, -0.5f);
    ASSERT_LE(v, 2.0f);
  }
}

TEST(Tensor, ForkSeedSeparatesConsumers) {
  const RngSeed root{99};
  EXPECT_EQ(fork_seed(root, "init", 0), fork_seed(root, "init", 0));
  EXPECT_NE(fork_seed(root, "init", 0), fork_seed(root, "init", 1));
  EXPECT_NE(fork_seed(root, "init", 0), fork_seed(root, "shuffle", 0));
}
