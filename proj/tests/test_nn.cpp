#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mosquitonet/nn.hpp"
#include "support/gradcheck.hpp"
#include "support/naive_conv.hpp"

using namespace mqnet;
using mqnet::testing::max_relative_error;
using mqnet::testing::numeric_gradient;
using mqnet::testing::random_tensor;

namespace {

Conv2d random_conv(std::size_t cin, std::size_t cout, ConvGeometry g, std::uint64_t seed) {
  Conv2d conv(cin, cout, g);
  conv.weight.value = random_tensor(conv.weight.value.shape(), seed);
  conv.bias.value = random_tensor(conv.bias.value.shape(), seed + 1);
  return conv;
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

TEST(Conv2d, ZeroKernelGivesZeros) {
  Conv2d conv(3, 4);
  const Tensor out = conv.forward(random_tensor({2, 3, 7, 7}, 1));
  EXPECT_EQ(out, Tensor({2, 4, 7, 7}));
}

TEST(Conv2d, DeltaKernelSumsChannels) {
  const Tensor x = random_tensor({1, 2, 6, 5}, 2);
  Conv2d conv(2, 1);
  conv.weight.value.at({0, 0, 2, 2}) = 1.0f;
  conv.weight.value.at({0, 1, 2, 2}) = 1.0f;
  const Tensor out = conv.forward(x);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      EXPECT_FLOAT_EQ(out.at({0, 0, i, j}), x.at({0, 0, i, j}) + x.at({0, 1, i, j}));

  Conv2d single(1, 1);
  single.weight.value.at({0, 0, 2, 2}) = 1.0f;
  const Tensor x1 = random_tensor({1, 1, 4, 4}, 3);
  EXPECT_EQ(single.forward(x1), x1);
}

TEST(Conv2d, AllOnesThreeByThree) {
  Conv2d conv(1, 1);
  conv.weight.value.fill(1.0f);
  const Tensor out = conv.forward(Tensor({1, 1, 3, 3}, 1.0f));
  EXPECT_EQ(out, Tensor({1, 1, 3, 3}, 9.0f));
}

TEST(Conv2d, PreservesSpatialSizeWithDefaultGeometry) {
  for (std::size_t h : {1u, 2u, 5u, 8u, 15u}) {
    for (std::size_t w : {1u, 3u, 4u}) {
      Conv2d conv(1, 2);
      EXPECT_EQ(conv.forward(Tensor({1, 1, h, w})).shape(), (Shape{1, 2, h, w}));
    }
  }
}

TEST(Conv2d, ChannelMismatchIsShapeError) {
  Conv2d conv(3, 4);
  EXPECT_THROW(conv.forward(Tensor({1, 2, 8, 8})), ShapeError);
}

TEST(Conv2d, MatchesNaiveConvolution) {
  Rng rng(RngSeed{11});
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t k = 1 + rng.engine()() % 5;
    ConvGeometry g{k, 1 + rng.engine()() % 3, rng.engine()() % 3};
    const std::size_t h = k + rng.engine()() % 6, w = k + rng.engine()() % 6;
    const std::size_t cin = 1 + rng.engine()() % 3, cout = 1 + rng.engine()() % 3;
    Conv2d conv = random_conv(cin, cout, g, 100 + trial);
    const Tensor x = random_tensor({2, cin, h, w}, 200 + trial);
    const Tensor fast = conv.forward(x);
    const Tensor slow = mqnet::testing::naive_conv2d(x, conv.weight.value, conv.bias.value, g.stride, g.pad);
    ASSERT_EQ(fast.shape(), slow.shape());
    for (std::size_t i = 0; i < fast.size(); ++i) ASSERT_NEAR(fast[i], slow[i], 1e-4 * std::max(1.0f, std::abs(slow[i])));
  }
}

TEST(Conv2d, Col2imIsAdjointOfIm2col) {
  // <im2col(x), c> == <x, col2im(c)> for every geometry, including pads
  // wider than the kernel and strides that skip pixels.
  Rng rng(RngSeed{31});
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t k = 1 + rng.engine()() % 5;
    const ConvGeometry g{k, 1 + rng.engine()() % 3, rng.engine()() % 4};
    const std::size_t h = k + rng.engine()() % 7, w = k + rng.engine()() % 7, c = 1 + rng.engine()() % 2;
    const std::size_t oh = g.output_extent(h), ow = g.output_extent(w);
    const Tensor x = random_tensor({c, h, w}, 300 + trial);
    const Tensor cols = random_tensor({c * k * k, oh * ow}, 400 + trial);
    std::vector<float> unrolled(cols.size());
    std::vector<float> folded(x.size());
    detail::im2col(x.data(), c, h, w, g, oh, ow, unrolled.data());
    detail::col2im(cols.data(), c, h, w, g, oh, ow, folded.data());
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < cols.size(); ++i) lhs += double(unrolled[i]) * cols[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += double(x[i]) * folded[i];
    ASSERT_NEAR(lhs, rhs, 1e-4 * std::max(1.0, std::abs(lhs))) << "trial " << trial;
  }
}

TEST(Conv2d, ZeroUpstreamGradientGivesZeroGradients) {
  Conv2d conv = random_conv(2, 3, {}, 5);
  Conv2d::Cache cache;
  const Tensor out = conv.forward(random_tensor({1, 2, 6, 6}, 6), &cache);
  const Tensor gx = conv.backward(cache, Tensor(out.shape()));
  EXPECT_EQ(gx, Tensor(gx.shape()));
  EXPECT_EQ(conv.weight.grad, Tensor(conv.weight.grad.shape()));
  EXPECT_EQ(conv.bias.grad, Tensor(conv.bias.grad.shape()));
}

TEST(Conv2d, BiasGradientIsChannelSumOfUpstream) {
  Conv2d conv = random_conv(2, 3, {}, 7);
  Conv2d::Cache cache;
  const Tensor out = conv.forward(random_tensor({2, 2, 5, 5}, 8), &cache);
  const Tensor g = random_tensor(out.shape(), 9);
  conv.backward(cache, g);
  for (std::size_t co = 0; co < 3; ++co) {
    double s = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t p = 0; p < 25; ++p) s += g[(n * 3 + co) * 25 + p];
    EXPECT_NEAR(conv.bias.grad[co], s, 1e-5);
  }
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  Conv2d conv = random_conv(2, 3, {}, 21);
  Tensor x = random_tensor({1, 2, 6, 6}, 22);
  const Tensor probe = random_tensor({1, 3, 6, 6}, 23);

  Conv2d::Cache cache;
  conv.forward(x, &cache);
  const Tensor gx = conv.backward(cache, probe);

  auto fwd = [&] { return conv.forward(x); };
  EXPECT_LT(max_relative_error(gx, numeric_gradient(x, fwd, probe)), 1e-3);
  EXPECT_LT(max_relative_error(conv.weight.grad, numeric_gradient(conv.weight.value, fwd, probe)), 1e-3);
  EXPECT_LT(max_relative_error(conv.bias.grad, numeric_gradient(conv.bias.value, fwd, probe)), 1e-3);
}

TEST(Conv2d, BackwardRejectsMismatchedGradient) {
  Conv2d conv(1, 2);
  Conv2d::Cache cache;
  conv.forward(Tensor({1, 1, 4, 4}), &cache);
  EXPECT_THROW(conv.backward(cache, Tensor({1, 2, 3, 3})), ShapeError);
  EXPECT_THROW(conv.backward(Conv2d::Cache{}, Tensor({1, 2, 4, 4})), ShapeError);
}

// ---------------------------------------------------------------------------
// batchnorm

TEST(BatchNorm2d, ConstantInputNormalizesToZero) {
  BatchNorm2d bn(2);
  const Tensor out = bn.forward_train(Tensor({2, 2, 3, 3}, 4.2f));
  for (float v : out.values()) EXPECT_LE(std::abs(v), std::sqrt(1e-5f));
}

TEST(BatchNorm2d, TwoValueChannel) {
  BatchNorm2d bn(1);
  const Tensor x({1, 1, 1, 2}, std::vector<float>{0.0f, 2.0f});
  const Tensor out = bn.forward_train(x);
  const float expected = 1.0f / std::sqrt(1.0f + 1e-5f);
  EXPECT_NEAR(out[0], -expected, 1e-6);
  EXPECT_NEAR(out[1], expected, 1e-6);
}

TEST(BatchNorm2d, RunningStatsUpdate) {
  BatchNorm2d bn(1);
  bn.forward_train(Tensor({1, 1, 1, 2}, std::vector<float>{0.0f, 2.0f}));
  EXPECT_NEAR(bn.running_mean[0], 0.1f, 1e-7);
  // unbiased variance of {0,2} is 2
  EXPECT_NEAR(bn.running_var[0], 0.9f * 1.0f + 0.1f * 2.0f, 1e-6);
}

TEST(BatchNorm2d, EvalRequiresRunningStats) {
  BatchNorm2d bn(2);
  EXPECT_THROW(bn.forward_eval(Tensor({1, 2, 2, 2})), DomainError);
  bn.init_running_stats();
  const Tensor x = random_tensor({1, 2, 2, 2}, 3);
  const Tensor out = bn.forward_eval(x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(out[i], x[i] / std::sqrt(1.0f + 1e-5f), 1e-6);
  EXPECT_EQ(bn.forward_eval(x), out);
}

TEST(BatchNorm2d, TrainNeedsTwoValuesPerChannel) {
  BatchNorm2d bn(1);
  EXPECT_THROW(bn.forward_train(Tensor({1, 1, 1, 1})), DomainError);
}

TEST(BatchNorm2d, TrainGradientsMatchFiniteDifferences) {
  BatchNorm2d bn(3);
  bn.gamma.value = random_tensor({3}, 30, 0.5f, 1.5f);
  bn.beta.value = random_tensor({3}, 31);
  Tensor x = random_tensor({2, 3, 4, 4}, 32);
  const Tensor probe = random_tensor(x.shape(), 33);
  BatchNorm2d::Cache cache;
  bn.forward_train(x, &cache);
  const Tensor gx = bn.backward(cache, probe);
  auto fwd = [&] { return bn.forward_train(x); };
  EXPECT_LT(max_relative_error(gx, numeric_gradient(x, fwd, probe)), 1e-3);
  EXPECT_LT(max_relative_error(bn.gamma.grad, numeric_gradient(bn.gamma.value, fwd, probe)), 1e-3);
  EXPECT_LT(max_relative_error(bn.beta.grad, numeric_gradient(bn.beta.value, fwd, probe)), 1e-3);
}

TEST(BatchNorm2d, EvalGradientsMatchFiniteDifferences) {
  BatchNorm2d bn(2);
  bn.set_running_stats(Tensor::vector({0.2f, -0.1f}), Tensor::vector({0.5f, 2.0f}));
  bn.gamma.value = Tensor::vector({1.3f, 0.7f});
  Tensor x = random_tensor({2, 2, 3, 3}, 34);
  const Tensor probe = random_tensor(x.shape(), 35);
  BatchNorm2d::Cache cache;
  bn.forward_eval(x, &cache);
  const Tensor gx = bn.backward(cache, probe);
  auto fwd = [&] { return bn.forward_eval(x); };
  EXPECT_LT(max_relative_error(gx, numeric_gradient(x, fwd, probe)), 1e-3);
  EXPECT_LT(max_relative_error(bn.gamma.grad, numeric_gradient(bn.gamma.value, fwd, probe)), 1e-3);
}

// ---------------------------------------------------------------------------
// relu / maxpool

TEST(Relu, SignCasesAndIdempotence) {
  EXPECT_EQ(relu(Tensor::vector({-1, 0, 2})), Tensor::vector({0, 0, 2}));
  const Tensor x = random_tensor({50}, 40);
  EXPECT_EQ(relu(relu(x)), relu(x));
}

TEST(Relu, SubgradientAtZeroIsZero) {
  ReluCache cache;
  relu(Tensor::vector({-1, 0, 2}), &cache);
  EXPECT_EQ(relu_backward(cache, Tensor::vector({5, 5, 5})), Tensor::vector({0, 0, 5}));
}

TEST(Relu, GradientMatchesFiniteDifferencesAwayFromKink) {
  Tensor x = random_tensor({64}, 41);
  for (float& v : x.values()) v = v < 0 ? v - 0.05f : v + 0.05f;
  const Tensor probe = random_tensor(x.shape(), 42);
  ReluCache cache;
  relu(x, &cache);
  const Tensor gx = relu_backward(cache, probe);
  EXPECT_LT(max_relative_error(gx, numeric_gradient(x, [&] { return relu(x); }, probe), 1e-6), 1e-4);
}

TEST(MaxPool2d, HandValues) {
  EXPECT_EQ(maxpool2d(Tensor({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4})), Tensor({1, 1, 1, 1}, 4.0f));
  Tensor ramp({1, 1, 4, 4});
  std::iota(ramp.values().begin(), ramp.values().end(), 0.0f);
  EXPECT_EQ(maxpool2d(ramp), Tensor({1, 1, 2, 2}, std::vector<float>{5, 7, 13, 15}));
}

TEST(MaxPool2d, OddExtentFloors) {
  EXPECT_EQ(maxpool2d(Tensor({1, 1, 5, 3})).shape(), (Shape{1, 1, 2, 1}));
}

TEST(MaxPool2d, TiesRouteToFirstPosition) {
  MaxPoolCache cache;
  maxpool2d(Tensor({1, 1, 2, 2}, 1.0f), {}, &cache);
  EXPECT_EQ(maxpool2d_backward(cache, Tensor({1, 1, 1, 1}, 3.0f)),
            Tensor({1, 1, 2, 2}, std::vector<float>{3, 0, 0, 0}));
}

TEST(MaxPool2d, GradientMatchesFiniteDifferences) {
  // Distinct values spaced well beyond the FD step, randomly permuted.
  Tensor x({2, 2, 6, 6});
  std::vector<float> vals(x.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.05f * static_cast<float>(i) - 3.0f;
  Rng rng(RngSeed{43});
  std::shuffle(vals.begin(), vals.end(), rng.engine());
  std::copy(vals.begin(), vals.end(), x.data());
  const Tensor probe = random_tensor({2, 2, 3, 3}, 44);
  MaxPoolCache cache;
  maxpool2d(x, {}, &cache);
  const Tensor gx = maxpool2d_backward(cache, probe);
  EXPECT_LT(max_relative_error(gx, numeric_gradient(x, [&] { return maxpool2d(x); }, probe)), 1e-3);
  std::size_t nonzero = 0;
  for (float v : gx.values()) nonzero += v != 0.0f;
  EXPECT_EQ(nonzero, probe.size());
}

// ---------------------------------------------------------------------------
// linear

TEST(Linear, IdentityWeights) {
  Linear fc(3, 3);
  fc.weight.value = identity(3);
  const Tensor x = random_tensor({4, 3}, 50);
  EXPECT_EQ(fc.forward(x), x);
}

TEST(Linear, HandValues) {
  Linear fc(2, 2);
  fc.weight.value = scale(identity(2), 3.0f);
  fc.bias.value = Tensor::vector({1, 1});
  EXPECT_EQ(fc.forward(Tensor::matrix({{1, 2}})), Tensor::matrix({{4, 7}}));
}

TEST(Linear, ShapeMismatch) {
  Linear fc(3, 2);
  EXPECT_THROW(fc.forward(Tensor({1, 4})), ShapeError);
  Linear::Cache cache;
  fc.forward(Tensor({2, 3}), &cache);
  EXPECT_THROW(fc.backward(cache, Tensor({2, 3})), ShapeError);
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  Linear fc(7, 4);
  fc.weight.value = random_tensor({7, 4}, 51);
  fc.bias.value = random_tensor({4}, 52);
  Tensor x = random_tensor({3, 7}, 53);
  const Tensor probe = random_tensor({3, 4}, 54);
  Linear::Cache cache;
  fc.forward(x, &cache);
  const Tensor gx = fc.backward(cache, probe);
  auto fwd = [&] { return fc.forward(x); };
  EXPECT_LT(max_relative_error(gx, numeric_gradient(x, fwd, probe)), 1e-3);
  EXPECT_LT(max_relative_error(fc.weight.grad, numeric_gradient(fc.weight.value, fwd, probe)), 1e-3);
  EXPECT_LT(max_relative_error(fc.bias.grad, numeric_gradient(fc.bias.value, fwd, probe)), 1e-3);
}

// ---------------------------------------------------------------------------
// dropout

TEST(Dropout, DegenerateCasesAreIdentity) {
  Rng rng(RngSeed{60});
  const Tensor x = random_tensor({100}, 61);
  EXPECT_EQ(dropout(x, 0.0f, Mode::train, rng), x);
  EXPECT_EQ(dropout(x, 0.0f, Mode::eval, rng), x);
  EXPECT_EQ(dropout(x, 0.5f, Mode::eval, rng), x);
  EXPECT_EQ(dropout(x, 0.9f, Mode::eval, rng), x);
}

TEST(Dropout, RejectsInvalidProbability) {
  Rng rng(RngSeed{62});
  EXPECT_THROW(dropout(Tensor({2}), 1.0f, Mode::train, rng), DomainError);
  EXPECT_THROW(dropout(Tensor({2}), -0.1f, Mode::eval, rng), DomainError);
}

TEST(Dropout, TrainStatistics) {
  Rng rng(RngSeed{63});
  const Tensor x = random_tensor({100000}, 64, 0.5f, 1.5f);
  const Tensor y = dropout(x, 0.2f, Mode::train, rng);
  std::size_t dropped = 0;
  double kept_in = 0, kept_out = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (y[i] == 0.0f) {
      ++dropped;
    } else {
      kept_in += x[i];
      kept_out += y[i] * 0.8;
    }
  }
  EXPECT_NEAR(static_cast<double>(dropped) / x.size(), 0.2, 0.01);
  // Survivors are scaled by 1/(1-p): the overall mean is preserved.
  EXPECT_NEAR(mean(y), mean(x), 0.02 * mean(x));
  EXPECT_NEAR(kept_out, kept_in, 1e-3 * kept_in);
}

TEST(Dropout, BackwardUsesSameMask) {
  Rng rng(RngSeed{65});
  DropoutCache cache;
  const Tensor x = random_tensor({1000}, 66);
  const Tensor y = dropout(x, 0.3f, Mode::train, rng, &cache);
  const Tensor g = dropout_backward(cache, Tensor(x.shape(), 1.0f));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(g[i] == 0.0f, y[i] == 0.0f && x[i] != 0.0f);
}

// ---------------------------------------------------------------------------
// softmax cross-entropy

TEST(SoftmaxCrossEntropy, SaturatedCorrect) {
  const std::vector<int> labels{0};
  EXPECT_LT(softmax_cross_entropy(Tensor::matrix({{20, -20}}), labels).loss, 1e-6);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLn2) {
  for (int label : {0, 1}) {
    const std::vector<int> labels{label};
    EXPECT_NEAR(softmax_cross_entropy(Tensor::matrix({{0, 0}}), labels).loss, std::log(2.0), 1e-12);
  }
}

TEST(SoftmaxCrossEntropy, RejectsBadLabel) {
  const std::vector<int> labels{2};
  EXPECT_THROW(softmax_cross_entropy(Tensor::matrix({{0, 0}}), labels), DomainError);
}

TEST(SoftmaxCrossEntropy, GradientMatchesFiniteDifferences) {
  Tensor logits = random_tensor({6, 2}, 70, -3.0f, 3.0f);
  const std::vector<int> labels{0, 1, 1, 0, 1, 0};
  const auto r = softmax_cross_entropy(logits, labels);
  Tensor numeric(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const float orig = logits[i];
    const float up = orig + 1e-2f, down = orig - 1e-2f;
    logits[i] = up;
    const double lp = softmax_cross_entropy(logits, labels).loss;
    logits[i] = down;
    const double lm = softmax_cross_entropy(logits, labels).loss;
    logits[i] = orig;
    numeric[i] = static_cast<float>((lp - lm) / (double(up) - double(down)));
  }
  EXPECT_LT(max_relative_error(r.grad_logits, numeric), 1e-3);
}

TEST(Softmax, RowsArePositiveAndSumToOne) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor p = softmax(random_tensor({8, 2}, seed, -30.0f, 30.0f));
    for (std::size_t r = 0; r < 8; ++r) {
      EXPECT_GT(p[2 * r], 0.0f);
      EXPECT_NEAR(double(p[2 * r]) + p[2 * r + 1], 1.0, 1e-6);
    }
  }
}
