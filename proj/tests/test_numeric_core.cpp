#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cpmamba/conv.hpp"
#include "cpmamba/gradcheck.hpp"
#include "cpmamba/loss.hpp"
#include "cpmamba/ops.hpp"
#include "cpmamba/optim.hpp"

using namespace cpmamba;
using Td = Tensor<double>;

namespace {

Td random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Td t(std::move(shape));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Weighted sum with fixed random weights so every output element matters.
Td probe(const Td& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Td w = random_tensor(y.shape(), rng);
  return sum(mul(y, w));
}

constexpr double kOpTolerance = 1e-5;

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Td eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Td m({3, 2}, {1, 2, 3, 4, 5, 6});
  Td out = matmul(eye, m);
  EXPECT_EQ(out.values(), m.values());
}

TEST(Matmul, HandProduct) {
  Td a({2, 2}, {1, 2, 3, 4});
  Td b({2, 1}, {1, 1});
  Td out = matmul(a, b);
  EXPECT_EQ(out.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(out[0], 3.0);
  EXPECT_DOUBLE_EQ(out[1], 7.0);
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  std::mt19937_64 rng(1);
  Td a = random_tensor({3, 4}, rng);
  Td b = random_tensor({4, 2}, rng);
  a.set_requires_grad(true);
  {
    GradientTape<double> tape;
    tape.backward(sum(matmul(a, b)));
  }
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k)
      EXPECT_NEAR(a.grad()[i * 4 + k], b[k * 2] + b[k * 2 + 1], 1e-12);
  auto r = check_gradients([&] { return sum(matmul(a, b)); }, {a, b});
  EXPECT_LT(r.max_rel_error, kOpTolerance);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Td({2, 3}), Td({2, 3})), DimensionError);
}

TEST(Conv2d, OneByOneIdentityWeights) {
  std::mt19937_64 rng(2);
  Td x = random_tensor({1, 3, 5, 5}, rng);
  Td w({3, 3, 1, 1}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(conv2d(x, w).values(), x.values());
}

TEST(Conv2d, AllOnesKernelOnOneHotImage) {
  Td x({1, 1, 5, 5});
  x[2 * 5 + 2] = 1.0;
  Td w = Td::full({1, 1, 3, 3}, 1.0);
  Td y = conv2d(x, w);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 5; ++c) {
      const bool plateau = r >= 1 && r <= 3 && c >= 1 && c <= 3;
      EXPECT_DOUBLE_EQ(y[r * 5 + c], plateau ? 1.0 : 0.0) << r << "," << c;
    }
}

TEST(Conv2d, ChannelMismatchThrows) {
  EXPECT_THROW(conv2d(Td({1, 2, 4, 4}), Td({1, 3, 3, 3})), DimensionError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  for (std::size_t k : {1u, 3u}) {
    Td x = random_tensor({2, 3, 6, 5}, rng);
    Td w = random_tensor({4, 3, k, k}, rng);
    Td b = random_tensor({4}, rng);
    auto r = check_gradients([&] { return probe(conv2d(x, w, &b)); }, {x, w, b});
    EXPECT_LT(r.max_rel_error, kOpTolerance) << "k=" << k << " worst " << r.worst;
  }
}

TEST(Elementwise, SigmoidValuesAndSlope) {
  Td x = Td::scalar(0.0);
  EXPECT_DOUBLE_EQ(sigmoid(x).item(), 0.5);
  x.set_requires_grad(true);
  {
    GradientTape<double> tape;
    tape.backward(sigmoid(x));
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(Elementwise, MulByOnesIsIdentity) {
  std::mt19937_64 rng(4);
  Td x = random_tensor({2, 3}, rng);
  EXPECT_EQ(mul(x, Td::full({2, 3}, 1.0)).values(), x.values());
}

TEST(Elementwise, IncompatibleBroadcastThrows) {
  EXPECT_THROW(add(Td({2, 3}), Td({2, 2})), DimensionError);
}

TEST(Elementwise, BroadcastValues) {
  Td a({2, 3}, {1, 2, 3, 4, 5, 6});
  Td b({3}, {10, 20, 30});
  Td c({2, 1}, {100, 200});
  EXPECT_EQ(add(a, b).values(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  EXPECT_EQ(mul(a, c).values(), (std::vector<double>{100, 200, 300, 800, 1000, 1200}));
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  Td a = random_tensor({2, 3, 4}, rng);
  Td b = random_tensor({3, 1}, rng);
  Td x = random_tensor({2, 3, 4}, rng, 0.1, 1.0);  // keep relu away from its kink
  struct Case {
    const char* name;
    std::function<Td()> fn;
    std::vector<Td> inputs;
  };
  std::vector<Case> cases = {
      {"add", [&] { return probe(add(a, b)); }, {a, b}},
      {"sub", [&] { return probe(sub(a, b)); }, {a, b}},
      {"mul", [&] { return probe(mul(a, b)); }, {a, b}},
      {"scale", [&] { return probe(scale(a, 2.5)); }, {a}},
      {"axpby", [&] { return probe(axpby(0.2, a, 0.8, x)); }, {a, x}},
      {"sigmoid", [&] { return probe(sigmoid(a)); }, {a}},
      {"softplus", [&] { return probe(softplus(a)); }, {a}},
      {"exp", [&] { return probe(exp(a)); }, {a}},
      {"relu", [&] { return probe(relu(x)); }, {x}},
      {"mean", [&] { return mean(mul(a, a)); }, {a}},
  };
  for (auto& c : cases) {
    auto r = check_gradients(c.fn, c.inputs);
    EXPECT_LT(r.max_rel_error, kOpTolerance) << c.name << " worst " << r.worst;
  }
}

TEST(Layout, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  Td m = random_tensor({4, 3}, rng);
  Td n = random_tensor({4, 2}, rng);
  Td w = random_tensor({3, 5}, rng);
  Td bias = random_tensor({5}, rng);
  Td gain = random_tensor({3}, rng, 0.5, 1.5);
  Td shift = random_tensor({3}, rng);
  const std::vector<std::size_t> rows = {2, 0, 3, 1, 2};
  struct Case {
    const char* name;
    std::function<Td()> fn;
    std::vector<Td> inputs;
  };
  std::vector<Case> cases = {
      {"transpose", [&] { return probe(transpose(m)); }, {m}},
      {"reshape", [&] { return probe(reshape(m, {2, 6})); }, {m}},
      {"concat", [&] { return probe(concat(m, n, 1)); }, {m, n}},
      {"gather_rows", [&] { return probe(gather_rows(m, rows)); }, {m}},
      {"linear", [&] { return probe(linear(m, w, &bias)); }, {m, w, bias}},
      {"layer_norm", [&] { return probe(layer_norm(m, gain, shift)); }, {m, gain, shift}},
  };
  for (auto& c : cases) {
    auto r = check_gradients(c.fn, c.inputs);
    EXPECT_LT(r.max_rel_error, kOpTolerance) << c.name << " worst " << r.worst;
  }
}

TEST(Pool, ConstantGridStaysConstant) {
  Td x = Td::full({1, 2, 8, 8}, 3.25);
  Td y = pool_downsample(x, 4);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 2, 2}));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 3.25);
}

TEST(Pool, BlockAverage) {
  Td x({1, 1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i + 1);
  EXPECT_DOUBLE_EQ(pool_downsample(x, 4).item(), 8.5);
}

TEST(Pool, QuadrantConstants) {
  Td x({1, 1, 8, 8});
  const double q[2][2] = {{1.0, 2.0}, {3.0, 4.0}};
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) x[r * 8 + c] = q[r / 4][c / 4];
  Td y = pool_downsample(x, 4);
  EXPECT_EQ(y.values(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Pool, NonDivisibleThrows) {
  EXPECT_THROW(pool_downsample(Td({1, 1, 6, 8}), 4), DimensionError);
}

TEST(Pool, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  Td x = random_tensor({2, 2, 8, 4}, rng);
  auto avg = check_gradients([&] { return probe(pool_downsample(x, 4)); }, {x});
  EXPECT_LT(avg.max_rel_error, kOpTolerance);
  auto mx = check_gradients([&] { return probe(pool_downsample(x, 2, PoolMode::max)); }, {x});
  EXPECT_LT(mx.max_rel_error, kOpTolerance);
}

TEST(Upsample, SingleValueFillsBlock) {
  Td x({1, 1, 1, 1}, std::vector<double>{2.5});
  Td y = upsample_nearest(x, 4);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(Upsample, BlockLayout) {
  Td x({1, 1, 2, 2}, {1, 2, 3, 4});
  Td y = upsample_nearest(x, 4);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_DOUBLE_EQ(y[r * 8 + c], x[(r / 4) * 2 + c / 4]);
}

TEST(Upsample, DownsampleOfUpsampleIsIdentity) {
  std::mt19937_64 rng(8);
  Td x = random_tensor({1, 3, 2, 3}, rng);
  Td round_trip = pool_downsample(upsample_nearest(x, 4), 4);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(round_trip[i], x[i], 1e-15);
  Td c = Td::full({1, 1, 8, 8}, 0.75);
  EXPECT_EQ(upsample_nearest(pool_downsample(c, 4), 4).values(), c.values());
  auto r = check_gradients([&] { return probe(upsample_nearest(x, 4)); }, {x});
  EXPECT_LT(r.max_rel_error, kOpTolerance);
}

TEST(Losses, DiceOfPerfectOneHotIsZero) {
  std::vector<int> labels = {0, 1, 2, 1, 0, 2};
  Td p({1, 3, 2, 3});
  for (std::size_t s = 0; s < 6; ++s) p[labels[s] * 6 + s] = 1.0;
  EXPECT_NEAR(dice_loss(p, std::span<const int>(labels)).item(), 0.0, 1e-15);
}

TEST(Losses, BinaryCrossEntropyAtHalf) {
  Td p = Td::scalar(0.5), y = Td::scalar(1.0);
  EXPECT_NEAR(binary_cross_entropy(p, y).item(), std::log(2.0), 1e-12);
}

TEST(Losses, SoftmaxCrossEntropyUniformIsLogK) {
  for (std::size_t k : {2u, 3u, 7u}) {
    Td logits({1, k, 2, 2});
    std::vector<int> labels = {0, 1, 0, static_cast<int>(k - 1)};
    EXPECT_NEAR(softmax_cross_entropy(logits, std::span<const int>(labels)).item(),
                std::log(static_cast<double>(k)), 1e-12);
  }
}

TEST(Losses, InvalidTargetsThrow) {
  Td logits({1, 3, 1, 2});
  std::vector<int> bad = {0, 3};
  EXPECT_THROW(softmax_cross_entropy(logits, std::span<const int>(bad)), std::invalid_argument);
  EXPECT_THROW(binary_cross_entropy(Td::scalar(0.5), Td::scalar(1.5)), std::invalid_argument);
  EXPECT_THROW(loss(LossKind::dice, Td({1, 2, 1, 1}), Td({1, 1, 1}, std::vector<double>{0.5})), std::invalid_argument);
}

TEST(Losses, NonNegative) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Td logits = random_tensor({1, 4, 3, 3}, rng, -3, 3);
    std::vector<int> labels(9);
    for (auto& l : labels) l = static_cast<int>(rng() % 4);
    EXPECT_GE(softmax_cross_entropy(logits, std::span<const int>(labels)).item(), 0.0);
    EXPECT_GE(dice_loss(softmax(logits), std::span<const int>(labels)).item(), 0.0);
  }
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(10);
  Td logits = random_tensor({2, 3, 2, 3}, rng, -2, 2);
  std::vector<int> labels(12);
  for (auto& l : labels) l = static_cast<int>(rng() % 3);
  Td p = random_tensor({2, 3, 4}, rng, 0.05, 0.95);
  Td y({2, 3, 4});
  for (auto& v : y.values()) v = static_cast<double>(rng() % 2);
  std::span<const int> lab(labels);
  auto ce = check_gradients([&] { return softmax_cross_entropy(logits, lab); }, {logits});
  EXPECT_LT(ce.max_rel_error, kOpTolerance);
  auto dice = check_gradients([&] { return dice_loss(softmax(logits), lab); }, {logits});
  EXPECT_LT(dice.max_rel_error, kOpTolerance);
  auto bce = check_gradients([&] { return binary_cross_entropy(p, y); }, {p});
  EXPECT_LT(bce.max_rel_error, kOpTolerance);
}

TEST(Sgd, ZeroGradientZeroDecayLeavesParams) {
  Td w({3}, {1, -2, 3}, true);
  w.grad();
  std::vector<NamedTensor<double>> params = {{"w", w}};
  Sgd<double> opt({0.1, 0.9, 0.0});
  opt.step(params);
  EXPECT_EQ(w.values(), (std::vector<double>{1, -2, 3}));
}

TEST(Sgd, QuadraticStep) {
  Td w = Td::scalar(1.0, true);
  std::vector<NamedTensor<double>> params = {{"w", w}};
  Sgd<double> opt({0.1, 0.0, 0.0});
  {
    GradientTape<double> tape;
    tape.backward(scale(mul(w, w), 0.5));
  }
  opt.step(params);
  EXPECT_DOUBLE_EQ(w.item(), 0.9);
}

TEST(Sgd, MomentumSecondStep) {
  const double lr = 0.1, g = 2.0;
  Td w = Td::scalar(0.0, true);
  w.grad()[0] = g;
  std::vector<NamedTensor<double>> params = {{"w", w}};
  Sgd<double> opt({lr, 0.9, 0.0});
  opt.step(params);
  const double after_first = w.item();
  opt.step(params);
  EXPECT_NEAR(after_first - w.item(), 1.9 * lr * g, 1e-12);
}

TEST(Sgd, MissingGradientThrows) {
  std::vector<NamedTensor<double>> params = {{"w", Td::scalar(1.0, true)}};
  Sgd<double> opt;
  EXPECT_THROW(opt.step(params), std::runtime_error);
}

TEST(Tape, ChainMatchesProductOfJacobians) {
  // y = sigmoid(3 * exp(x)) at scalar probes
  for (double x0 : {-1.0, 0.0, 0.7}) {
    Td x = Td::scalar(x0, true);
    {
      GradientTape<double> tape;
      tape.backward(sigmoid(scale(exp(x), 3.0)));
    }
    const double u = 3.0 * std::exp(x0);
    const double s = 1.0 / (1.0 + std::exp(-u));
    EXPECT_NEAR(x.grad()[0], s * (1 - s) * 3.0 * std::exp(x0), 1e-14);
  }
}

TEST(Tape, ClearedAfterBackwardAndNoRecordingWithoutTape) {
  Td x = Td::scalar(2.0, true);
  Td y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
  GradientTape<double> tape;
  Td z = mul(x, x);
  EXPECT_TRUE(z.requires_grad());
  EXPECT_EQ(tape.size(), 1u);
  tape.backward(z);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
}

TEST(Properties, RandomShapeGradcheckSweep) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t b = 1 + rng() % 2, c = 1 + rng() % 4;
    const std::size_t h = 4 * (1 + rng() % 4), w = 4 * (1 + rng() % 4);
    Td x = random_tensor({b, c, h, w}, rng);
    Td k = random_tensor({2, c, 3, 3}, rng);
    GradCheckOptions opt;
    opt.max_elements_per_input = 64;
    auto r = check_gradients(
        [&] { return probe(sigmoid(pool_downsample(conv2d(x, k), 4)), trial); }, {x, k}, opt);
    EXPECT_LT(r.max_rel_error, kOpTolerance) << to_string(x.shape());
  }
}

TEST(Properties, DeterministicForwardAndBackward) {
  auto run = [] {
    std::mt19937_64 rng(12);
    Tensor<float> x({1, 2, 8, 8});
    auto w = Tensor<float>::zeros({3, 2, 3, 3}, true);
    std::normal_distribution<float> n;
    for (auto& v : x.values()) v = n(rng);
    for (auto& v : w.values()) v = n(rng);
    GradientTape<float> tape;
    Tensor<float> y = mean(sigmoid(conv2d(x, w)));
    tape.backward(y);
    std::vector<float> out = y.values();
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}
