#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "brainseg/errors.hpp"
#include "brainseg/nn/grad_check.hpp"
#include "brainseg/rpn.hpp"
#include "oracles.hpp"

using namespace brainseg;
using nn::Tensor;
using nn::Var;

namespace {

AnchorSet manual_anchors(std::vector<Box> boxes) {
  AnchorSet a;
  a.boxes = std::move(boxes);
  a.level.assign(a.boxes.size(), 0);
  a.strides = {4};
  a.shapes = {{1, static_cast<int>(a.boxes.size())}};
  a.ratios_per_location = 1;
  return a;
}

RpnPrediction<double> prediction(const std::vector<double>& object_prob, const std::vector<double>& deltas) {
  const int n = static_cast<int>(object_prob.size());
  Tensor<double> p({n, 2});
  for (int i = 0; i < n; ++i) {
    p[2 * i] = 1 - object_prob[i];
    p[2 * i + 1] = object_prob[i];
  }
  return {Var<double>(p), Var<double>(Tensor<double>({n, 4}, deltas))};
}

}  // namespace

TEST(Labels, SpecExamples) {
  std::mt19937_64 rng(1);
  const std::vector<Box> gt{{0, 0, 10, 16}};
  const auto a = manual_anchors({{0, 0, 10, 16}, {50, 50, 60, 60}, {0, 0, 10, 10}});
  const auto l = label_anchors(a, gt, 64, rng);
  EXPECT_EQ(l.p_star, (std::vector<std::int8_t>{1, 0, 1}));
  EXPECT_EQ(l.q_star[0], BoxDelta{});
  EXPECT_EQ(l.matched_gt[2], 0);
  EXPECT_DOUBLE_EQ(iou(a.boxes[2], gt[0]), 0.625);
}

TEST(Labels, ArgmaxRescue) {
  // No anchor reaches 0.5, so the best ones (a tie) are forced positive.
  std::mt19937_64 rng(1);
  const std::vector<Box> gt{{0, 0, 10, 10}};
  const auto a = manual_anchors({{0, 0, 10, 30}, {0, 0, 30, 10}, {0, 0, 10, 40}, {20, 20, 30, 30}});
  const auto l = label_anchors(a, gt, 64, rng);
  EXPECT_EQ(l.p_star, (std::vector<std::int8_t>{1, 1, 0, 0}));
}

TEST(Labels, EveryBoxGetsAPositive) {
  std::mt19937_64 rng(4);
  const std::vector<FeatureShape> shapes{{16, 16}, {8, 8}};
  const std::vector<int> strides{4, 8};
  const std::vector<double> scales{16, 32}, ratios{0.5, 1, 2};
  const auto a = generate_anchors(shapes, strides, scales, ratios);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Box> gt;
    for (int k = 0; k < 5; ++k) {
      Box b = oracle::random_int_box(rng, 64);
      if (b.area() > 0) gt.push_back(b);
    }
    if (gt.empty()) continue;
    const auto l = label_anchors(a, gt, 1000000, rng);
    auto best_iou = [&](const Box& g) {
      double best = 0;
      for (const auto& b : a.boxes) best = std::max(best, iou(b, g));
      return best;
    };
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (l.p_star[i] != 1) continue;
      const auto& m = gt[l.matched_gt[i]];
      EXPECT_TRUE(iou(a.boxes[i], m) >= 0.5 || iou(a.boxes[i], m) == best_iou(m));
    }
    // Each box's best anchor is positive (possibly matched to a box it
    // overlaps even more).
    for (const auto& g : gt) {
      bool found = false;
      for (std::size_t i = 0; i < a.size(); ++i) found = found || (l.p_star[i] == 1 && iou(a.boxes[i], g) == best_iou(g));
      EXPECT_TRUE(found);
    }
  }
}

TEST(Labels, SamplingCaps) {
  std::mt19937_64 rng(2);
  std::vector<Box> boxes(100, Box{0, 0, 10, 10});
  for (int i = 0; i < 300; ++i) boxes.push_back({100.0 + i, 0, 110.0 + i, 10});
  const auto a = manual_anchors(boxes);
  const std::vector<Box> gt{{0, 0, 10, 10}};
  const auto l = label_anchors(a, gt, 64, rng);
  EXPECT_EQ(l.num_positive(), 32u);
  EXPECT_EQ(l.num_sampled(), 64u);

  // Few positives: negatives fill the rest.
  std::vector<Box> few(3, Box{0, 0, 10, 10});
  few.insert(few.end(), boxes.begin() + 100, boxes.end());
  const auto m = label_anchors(manual_anchors(few), gt, 64, rng);
  EXPECT_EQ(m.num_positive(), 3u);
  EXPECT_EQ(m.num_sampled(), 64u);

  EXPECT_THROW(label_anchors(a, {}, 64, rng), ValidationError);
}

TEST(Labels, SeededSampling) {
  std::vector<Box> boxes(50, Box{0, 0, 10, 10});
  for (int i = 0; i < 200; ++i) boxes.push_back({100.0 + i, 0, 110.0 + i, 10});
  const auto a = manual_anchors(boxes);
  const std::vector<Box> gt{{0, 0, 10, 10}};
  std::mt19937_64 r1(9), r2(9);
  EXPECT_EQ(label_anchors(a, gt, 32, r1).p_star, label_anchors(a, gt, 32, r2).p_star);
}

TEST(RpnHead, RowsMatchAnchorsAndSumToOne) {
  nn::ParameterStore<float> store;
  std::mt19937_64 rng(1);
  RpnHead<float> head(4, 3, 1.0, store, rng);
  std::uniform_real_distribution<float> d(-1, 1);
  for (int levels = 1; levels <= 3; ++levels) {
    PyramidFeatures<float> p;
    std::vector<FeatureShape> shapes;
    for (int l = 0; l < levels; ++l) {
      Tensor<float> t({4, 8 >> l, 6 >> l});
      for (auto& v : t.values()) v = d(rng);
      p.levels.emplace_back(t);
      p.strides.push_back(4 << l);
      shapes.push_back({8 >> l, 6 >> l});
    }
    const std::vector<double> scales{16, 32, 64}, ratios{0.5, 1, 2};
    const auto anchors = generate_anchors(shapes, p.strides, std::span(scales).first(levels), ratios);
    const auto pred = rpn_forward(head, p, anchors);
    const int n = static_cast<int>(anchors.size());
    EXPECT_EQ(pred.objectness.shape(), (nn::Shape{n, 2}));
    EXPECT_EQ(pred.deltas.shape(), (nn::Shape{n, 4}));
    for (int i = 0; i < n; ++i) EXPECT_NEAR(pred.objectness.value()[2 * i] + pred.objectness.value()[2 * i + 1], 1.0, 1e-6);
    EXPECT_EQ(rpn_forward(head, p, anchors).objectness.value(), pred.objectness.value());
    if (levels > 1) {
      const auto wrong = generate_anchors(std::span(shapes).first(1), std::span(p.strides).first(1),
                                          std::span(scales).first(1), ratios);
      EXPECT_THROW(rpn_forward(head, p, wrong), ValidationError);
    }
  }
}

TEST(Proposals, SingleAnchor) {
  const auto a = manual_anchors({{-4, 10, 20, 30}});
  const auto p = generate_proposals(prediction({0.8}, {0, 0, 0, 0}), a, 40, 40, 10, 10, 0.7);
  ASSERT_EQ(p.boxes.size(), 1u);
  EXPECT_EQ(p.boxes[0], (Box{0, 0.25, 0.5, 0.75}));
  EXPECT_DOUBLE_EQ(p.scores[0], 0.8);
}

TEST(Proposals, DuplicatesCollapse) {
  const auto a = manual_anchors({{0, 0, 10, 10}, {0, 0, 10, 10}, {20, 20, 30, 30}});
  const auto p = generate_proposals(prediction({0.3, 0.9, 0.5}, std::vector<double>(12, 0.0)), a, 40, 40, 10, 10, 0.7);
  ASSERT_EQ(p.boxes.size(), 2u);
  EXPECT_DOUBLE_EQ(p.scores[0], 0.9);
  EXPECT_DOUBLE_EQ(p.scores[1], 0.5);
}

TEST(Proposals, NormalizedAndCapped) {
  std::mt19937_64 rng(3);
  std::vector<Box> boxes;
  std::vector<double> prob, deltas;
  std::uniform_real_distribution<double> d(-2, 2), u(0, 1);
  for (int i = 0; i < 300; ++i) {
    boxes.push_back(oracle::random_int_box(rng, 80));
    boxes.back().y2 += 1;
    boxes.back().x2 += 1;
    prob.push_back(u(rng));
    for (int c = 0; c < 4; ++c) deltas.push_back(d(rng));
  }
  const auto p = generate_proposals(prediction(prob, deltas), manual_anchors(boxes), 64, 64, 200, 25, 0.7);
  EXPECT_LE(p.boxes.size(), 25u);
  for (std::size_t i = 0; i < p.boxes.size(); ++i) {
    const Box& b = p.boxes[i];
    EXPECT_TRUE(0 <= b.y1 && b.y1 <= b.y2 && b.y2 <= 1 && 0 <= b.x1 && b.x1 <= b.x2 && b.x2 <= 1);
    if (i > 0) EXPECT_LE(p.scores[i], p.scores[i - 1]);
  }
}

TEST(RpnLoss, PerfectPredictionsAreFree) {
  AnchorLabels l;
  l.p_star = {1, 0, AnchorLabels::kUnsampled};
  l.q_star = {BoxDelta{0.1, -0.2, 0.3, 0.0}, {}, {}};
  l.matched_gt = {0, -1, -1};
  const auto r = rpn_loss(prediction({1, 0, 0.5}, {0.1, -0.2, 0.3, 0, 5, 5, 5, 5, 5, 5, 5, 5}), l, LossConfig{});
  EXPECT_EQ(r.total.value()[0], 0.0);
}

TEST(RpnLoss, SmoothL1ClosedForm) {
  AnchorLabels l;
  l.p_star = {1, 0};
  l.q_star = {BoxDelta{}, {}};
  l.matched_gt = {0, -1};
  LossConfig cfg;
  cfg.mu = 3.0;
  const auto r = rpn_loss(prediction({1, 0}, {0.5, 0, 0, 0, 9, 9, 9, 9}), l, cfg);
  EXPECT_DOUBLE_EQ(r.reg.value()[0], 0.125 * 3.0 / 1.0);
  EXPECT_EQ(r.cls.value()[0], 0.0);

  cfg.n_reg = Normalizer::kFixed;
  cfg.n_reg_fixed = 4.0;
  EXPECT_DOUBLE_EQ(rpn_loss(prediction({1, 0}, {0.5, 0, 0, 0, 9, 9, 9, 9}), l, cfg).reg.value()[0],
                   0.125 * 3.0 / 4.0);
}

TEST(RpnLoss, NegativesHaveNoRegressionTerm) {
  AnchorLabels l;
  l.p_star = {0, 0};
  l.q_star = {BoxDelta{}, {}};
  l.matched_gt = {-1, -1};
  const auto r = rpn_loss(prediction({0.2, 0.4}, {7, 7, 7, 7, -7, -7, -7, -7}), l, LossConfig{});
  EXPECT_EQ(r.reg.value()[0], 0.0);
  EXPECT_NEAR(r.cls.value()[0], -(std::log(0.8) + std::log(0.6)) / 2, 1e-12);
}

TEST(RpnLoss, NothingSampledIsAnError) {
  AnchorLabels l;
  l.p_star = {AnchorLabels::kUnsampled};
  l.q_star = {BoxDelta{}};
  l.matched_gt = {-1};
  EXPECT_THROW(rpn_loss(prediction({0.5}, {0, 0, 0, 0}), l, LossConfig{}), ValidationError);
}

TEST(RpnLoss, GradientOnTenAnchors) {
  for (unsigned seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    AnchorLabels l;
    std::uniform_real_distribution<double> d(-1.5, 1.5);
    for (int i = 0; i < 10; ++i) {
      l.p_star.push_back(static_cast<std::int8_t>(i < 3 ? 1 : (i < 8 ? 0 : AnchorLabels::kUnsampled)));
      l.q_star.push_back(i < 3 ? BoxDelta{d(rng), d(rng), d(rng), d(rng)} : BoxDelta{});
      l.matched_gt.push_back(i < 3 ? 0 : -1);
    }
    Tensor<double> logits({10, 2}), deltas({10, 4});
    for (auto& v : logits.values()) v = d(rng);
    for (auto& v : deltas.values()) v = d(rng);
    const auto r = nn::grad_check<double>(
        [&](const std::vector<Var<double>>& v) {
          return rpn_loss(RpnPrediction<double>{nn::softmax_rows(v[0]), v[1]}, l, LossConfig{}).total;
        },
        {logits, deltas}, 1e-6);
    EXPECT_LT(r.max_rel_error, 1e-3) << seed;
  }
}
