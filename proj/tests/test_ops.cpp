#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "brainseg/nn/grad_check.hpp"
#include "brainseg/nn/ops.hpp"
#include "brainseg/nn/parameters.hpp"

namespace brainseg::nn {
namespace {

using VarsD = std::vector<Var<double>>;
using Fn = std::function<Var<double>(const VarsD&)>;

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

// Weighted sum so that every output coordinate gets a distinct upstream gradient.
Var<double> project(const Var<double>& x, unsigned seed) {
  std::mt19937_64 rng(seed);
  Tensor<double> w = random_tensor(x.shape(), rng);
  const int n = static_cast<int>(x.value().size());
  return reshape(dense(reshape(x, {1, n}), Var<double>(w.reshaped({n, 1})), Var<double>()), {1});
}

constexpr double kTol = 1e-3;

void expect_grad_ok(const Fn& fn, const std::vector<Tensor<double>>& inputs) {
  const GradCheckResult r = grad_check<double>(fn, inputs, 1e-6);
  EXPECT_LT(r.max_rel_error, kTol) << "worst input " << r.input << " index " << r.index;
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(1);
  Var<float> x(random_tensor({2, 4, 5}, rng).cast<float>());
  Tensor<float> w({2, 2, 1, 1});
  w[0] = 1;
  w[3] = 1;
  const auto y = conv2d(x, Var<float>(w), Var<float>(Tensor<float>({2})), 1, 0);
  EXPECT_EQ(y.value(), x.value());
}

TEST(Conv2d, OnesKernelOnConstant) {
  Var<float> x(Tensor<float>({1, 5, 5}, 2.5f));
  Var<float> w(Tensor<float>({1, 1, 3, 3}, 1.0f));
  const auto y = conv2d(x, w, Var<float>(Tensor<float>({1})), 1, 1);
  EXPECT_FLOAT_EQ(y.value()[2 * 5 + 2], 22.5f);
  EXPECT_FLOAT_EQ(y.value()[0], 10.0f);  // corner sees 4 taps
}

TEST(Conv2d, ShapeMismatchNamesDimensions) {
  Var<float> x(Tensor<float>({3, 5, 5}));
  Var<float> w(Tensor<float>({2, 4, 3, 3}));
  try {
    conv2d(x, w, Var<float>(), 1, 1);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("4 input channels"), std::string::npos);
  }
  EXPECT_THROW(conv2d(x, Var<float>(Tensor<float>({2, 3, 2, 2})), Var<float>(), 1, 1), ValidationError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  for (unsigned seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    for (int stride : {1, 2}) {
      expect_grad_ok(
          [&](const VarsD& v) { return project(conv2d(v[0], v[1], v[2], stride, 1), seed); },
          {random_tensor({2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
    }
    // batched 1x1
    expect_grad_ok([&](const VarsD& v) { return project(conv2d(v[0], v[1], v[2], 1, 0), seed + 7); },
                   {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3, 1, 1}, rng), random_tensor({2}, rng)});
  }
}

TEST(Resample, ConstantInputStaysConstant) {
  Var<float> x(Tensor<float>({2, 4, 6}, 3.0f));
  for (auto mode : {ResampleMode::kMaxPool2x2, ResampleMode::kNearestUpsample2x}) {
    const auto y = resample2d(x, mode);
    for (float v : y.value().values()) EXPECT_EQ(v, 3.0f);
  }
  const auto round = resample2d(resample2d(x, ResampleMode::kMaxPool2x2), ResampleMode::kNearestUpsample2x);
  EXPECT_EQ(round.value(), x.value());
}

TEST(Resample, PoolRoutesGradientToMaximum) {
  Var<double> x(Tensor<double>({1, 2, 2}, {1, 2, 3, 4}), true);
  const auto y = resample2d(x, ResampleMode::kMaxPool2x2);
  EXPECT_EQ(y.value()[0], 4.0);
  backward(sum(y));
  EXPECT_EQ(x.grad().values()[3], 1.0);
  EXPECT_EQ(x.grad().values()[0] + x.grad().values()[1] + x.grad().values()[2], 0.0);
}

TEST(Resample, OddExtentRejected) {
  Var<float> x(Tensor<float>({1, 3, 4}));
  EXPECT_THROW(resample2d(x, ResampleMode::kMaxPool2x2), ValidationError);
}

TEST(Resample, GradientsMatchFiniteDifferences) {
  for (unsigned seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed + 100);
    expect_grad_ok([&](const VarsD& v) { return project(resample2d(v[0], ResampleMode::kMaxPool2x2), seed); },
                   {random_tensor({2, 4, 6}, rng)});
    expect_grad_ok(
        [&](const VarsD& v) { return project(resample2d(v[0], ResampleMode::kNearestUpsample2x), seed); },
        {random_tensor({2, 3, 2}, rng)});
  }
}

TEST(Dense, IdentityAndOnes) {
  Tensor<float> eye({3, 3});
  eye[0] = eye[4] = eye[8] = 1;
  Var<float> x(Tensor<float>({1, 3}, {1, 2, 3}));
  EXPECT_EQ(dense(x, Var<float>(eye), Var<float>(Tensor<float>({3}))).value(), x.value());
  const auto y = dense(x, Var<float>(Tensor<float>({3, 2}, 1.0f)), Var<float>(Tensor<float>({2})));
  EXPECT_FLOAT_EQ(y.value()[0], 6.0f);
  EXPECT_FLOAT_EQ(y.value()[1], 6.0f);
  EXPECT_THROW(dense(x, Var<float>(Tensor<float>({2, 2})), Var<float>()), ValidationError);
}

TEST(Dense, GradientMatchesFiniteDifferences) {
  for (unsigned seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed + 200);
    expect_grad_ok([&](const VarsD& v) { return project(dense(v[0], v[1], v[2]), seed); },
                   {random_tensor({4, 6}, rng), random_tensor({6, 3}, rng), random_tensor({3}, rng)});
  }
}

TEST(Activation, PointValues) {
  Var<float> x(Tensor<float>({2}, {-1.0f, 2.0f}));
  const auto r = relu(x);
  EXPECT_EQ(r.value()[0], 0.0f);
  EXPECT_EQ(r.value()[1], 2.0f);
  EXPECT_FLOAT_EQ(sigmoid(Var<float>(Tensor<float>({1}, 0.0f))).value()[0], 0.5f);
  const auto sm = softmax_rows(Var<float>(Tensor<float>({1, 9}, 0.3f)));
  for (float v : sm.value().values()) EXPECT_FLOAT_EQ(v, 1.0f / 9.0f);
}

TEST(Activation, SoftmaxStableForLargeInputs) {
  std::mt19937_64 rng(8);
  Var<float> x(random_tensor({20, 9}, rng, -1e4, 1e4).cast<float>());
  const auto y = softmax_rows(x);
  for (int r = 0; r < 20; ++r) {
    double s = 0;
    for (int c = 0; c < 9; ++c) {
      const float v = y.value()[r * 9 + c];
      ASSERT_TRUE(std::isfinite(v));
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Activation, GradientsMatchFiniteDifferences) {
  for (unsigned seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed + 300);
    for (auto mode : {Activation::kRelu, Activation::kSigmoid, Activation::kSoftmaxRows}) {
      expect_grad_ok([&](const VarsD& v) { return project(activation(v[0], mode), seed); },
                     {random_tensor({3, 5}, rng, -3, 3)});
    }
  }
}

TEST(ShapeOps, GradientsMatchFiniteDifferences) {
  for (unsigned seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed + 400);
    expect_grad_ok(
        [&](const VarsD& v) {
          return project(concat_rows<double>({anchor_rows(v[0], 2), reshape(v[1], {6, 2})}), seed);
        },
        {random_tensor({6, 2, 3}, rng), random_tensor({3, 4}, rng)});
    expect_grad_ok(
        [&](const VarsD& v) { return project(gather(add(v[0], scale(v[1], 0.7)), {0, 3, 3, 5}, {2, 2}), seed); },
        {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
    Tensor<double> sc = random_tensor({3}, rng), sh = random_tensor({3}, rng);
    expect_grad_ok([&](const VarsD& v) { return project(frozen_affine(v[0], sc, sh), seed); },
                   {random_tensor({3, 2, 2}, rng)});
  }
}

TEST(ShapeOps, AnchorRowsLayout) {
  // channels a*G+g, 2 anchors, group 2, 1x2 map
  Tensor<float> m({4, 1, 2}, {0, 1, 10, 11, 20, 21, 30, 31});
  const auto rows = anchor_rows(Var<float>(m), 2);
  EXPECT_EQ(rows.shape(), (Shape{4, 2}));
  EXPECT_EQ(rows.value().values()[0], 0);
  EXPECT_EQ(rows.value().values()[1], 10);
  EXPECT_EQ(rows.value().values()[2], 20);
  EXPECT_EQ(rows.value().values()[4], 1);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  for (unsigned seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed + 500);
    const std::vector<int> labels{0, 2, 1, 2};
    expect_grad_ok([&](const VarsD& v) { return cross_entropy(softmax_rows(v[0]), labels, 4.0); },
                   {random_tensor({4, 3}, rng, -2, 2)});
    Tensor<double> target = random_tensor({3, 4}, rng, -2, 2);
    // keep |pred - target| away from the kink at 1
    Tensor<double> pred = target;
    std::uniform_real_distribution<double> off(0.1, 0.8);
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] += (i % 2 ? 1.0 : -1.0) * (i % 3 ? off(rng) : 1.2 + off(rng));
    expect_grad_ok([&](const VarsD& v) { return smooth_l1(v[0], target, 3.0); }, {pred});
    Tensor<double> bt = random_tensor({2, 5}, rng, 0, 1);
    for (auto& t : bt.values()) t = t > 0.5 ? 1.0 : 0.0;
    expect_grad_ok([&](const VarsD& v) { return binary_cross_entropy(sigmoid(v[0]), bt); },
                   {random_tensor({2, 5}, rng, -3, 3)});
  }
}

TEST(Losses, ClosedForms) {
  Var<float> p(Tensor<float>({2, 2}, {1, 0, 0, 1}));
  const std::vector<int> labels{0, 1};
  EXPECT_EQ(cross_entropy(p, labels, 2.0).value()[0], 0.0f);
  Tensor<float> t({1, 4}, {0, 0, 0, 0});
  EXPECT_FLOAT_EQ(smooth_l1(Var<float>(Tensor<float>({1, 4}, {0.5f, 0, 0, 0})), t, 1.0).value()[0], 0.125f);
  EXPECT_FLOAT_EQ(smooth_l1(Var<float>(Tensor<float>({1, 4}, {3.0f, 0, 0, 0})), t, 2.0).value()[0], 1.25f);
  Tensor<float> mt({4}, {1, 0, 1, 0});
  EXPECT_NEAR(binary_cross_entropy(Var<float>(Tensor<float>({4}, 0.5f)), mt).value()[0], std::log(2.0), 1e-6);
  EXPECT_EQ(binary_cross_entropy(Var<float>(mt), mt).value()[0], 0.0f);
}

TEST(GradCheck, LinearAndQuadratic) {
  std::mt19937_64 rng(42);
  const auto lin = grad_check<double>([](const VarsD& v) { return sum(v[0]); }, {random_tensor({7}, rng)}, 1e-4);
  EXPECT_LT(lin.max_abs_error, 1e-9);
  const Tensor<double> x = random_tensor({6}, rng);
  Var<double> xv(x, true);
  const int n = 6;
  backward(reshape(dense(reshape(xv, {1, n}), reshape(xv, {n, 1}), Var<double>()), {1}));
  for (int i = 0; i < n; ++i) EXPECT_NEAR(xv.grad()[i], 2 * x[i], 1e-6);
  const auto quad = grad_check<double>(
      [n](const VarsD& v) { return reshape(dense(reshape(v[0], {1, n}), reshape(v[0], {n, 1}), Var<double>()), {1}); },
      {x}, 1e-5);
  EXPECT_LT(quad.max_abs_error, 1e-6);
}

TEST(GradCheck, CompositeNetwork) {
  for (unsigned seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed + 600);
    const std::vector<int> labels{1, 0};
    expect_grad_ok(
        [&](const VarsD& v) {
          auto h = relu(conv2d(v[0], v[1], v[2], 1, 1));     // [2,3,3]
          auto flat = reshape(h, {2, 9});
          return cross_entropy(softmax_rows(dense(flat, v[3], v[4])), labels, 2.0);
        },
        {random_tensor({1, 3, 3}, rng), random_tensor({2, 1, 3, 3}, rng), random_tensor({2}, rng),
         random_tensor({9, 4}, rng), random_tensor({4}, rng)});
  }
}

TEST(GradCheck, NonFiniteIsRejected) {
  EXPECT_THROW(grad_check<double>(
                   [](const VarsD& v) { return scale(sum(v[0]), std::numeric_limits<double>::infinity()); },
                   {Tensor<double>({2}, 1.0)}, 1e-4),
               ValidationError);
}

TEST(Autograd, AccumulationIsAdditive) {
  std::mt19937_64 rng(9);
  Var<double> w(random_tensor({3, 2}, rng), true);
  Var<double> x(random_tensor({4, 3}, rng));
  const auto loss = sum(relu(dense(x, w, Var<double>())));
  backward(loss);
  const Tensor<double> once = w.grad();
  backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(w.grad()[i], 2 * once[i]);
}

TEST(Autograd, ForwardIsDeterministic) {
  std::mt19937_64 rng(10);
  Var<float> x(random_tensor({3, 16, 16}, rng).cast<float>());
  Var<float> w(random_tensor({8, 3, 3, 3}, rng).cast<float>());
  Var<float> b(random_tensor({8}, rng).cast<float>());
  EXPECT_EQ(conv2d(x, w, b, 2, 1).value(), conv2d(x, w, b, 2, 1).value());
}

TEST(Sgd, VanillaStep) {
  ParameterStore<float> store;
  Var<float> p = store.add("w", {2});
  p.mutable_value() = Tensor<float>({2}, {1.0f, 2.0f});
  p.grad_buffer() = Tensor<float>({2}, {0.5f, -1.0f});
  sgd_step<float>(store.trainable(), 0.1, 0.0);
  EXPECT_FLOAT_EQ(p.value()[0], 0.95f);
  EXPECT_FLOAT_EQ(p.value()[1], 2.1f);
  EXPECT_FALSE(p.has_grad());
}

TEST(Sgd, ZeroLearningRateUpdatesBuffersOnly) {
  ParameterStore<float> store;
  Var<float> p = store.add("w", {1});
  p.mutable_value()[0] = 3.0f;
  p.grad_buffer()[0] = 2.0f;
  sgd_step<float>(store.trainable(), 0.0, 0.9);
  EXPECT_EQ(p.value()[0], 3.0f);
  EXPECT_EQ(store.at("w").momentum[0], 2.0f);
}

TEST(Sgd, MomentumRecurrence) {
  ParameterStore<double> store;
  Var<double> p = store.add("w", {1});
  const double lr = 0.01, g = 3.0;
  for (int step = 0; step < 2; ++step) {
    p.grad_buffer()[0] = g;
    sgd_step<double>(store.trainable(), lr, 0.9);
  }
  EXPECT_NEAR(p.value()[0], -lr * g * (1 + 1.9), 1e-15);
}

TEST(Sgd, MissingGradientNamesParameter) {
  ParameterStore<float> store;
  store.add("heads.cls.fc1.weight", {2});
  try {
    sgd_step<float>(store.trainable(), 0.1, 0.9);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("heads.cls.fc1.weight"), std::string::npos);
  }
}

TEST(Parameters, DuplicateNamesRejectedAndFreezeByPrefix) {
  ParameterStore<float> store;
  store.add("backbone.a", {1});
  store.add("rpn.b", {1});
  EXPECT_THROW(store.add("rpn.b", {1}), ConfigError);
  store.set_trainable({"backbone."});
  ASSERT_EQ(store.trainable().size(), 1u);
  EXPECT_EQ(store.trainable()[0]->name, "rpn.b");
}

}  // namespace
}  // namespace brainseg::nn
