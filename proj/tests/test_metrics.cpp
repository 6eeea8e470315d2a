#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "ap_scenarios.hpp"
#include "brainseg/errors.hpp"
#include "brainseg/metrics.hpp"
#include "oracles.hpp"

using namespace brainseg;
using scenarios::det;
using scenarios::rect;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("brainseg_metrics_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Overlap, IdenticalMasks) {
  const Mask m = rect(3, 4, 10, 9);
  const auto r = mask_overlap_metrics(m, m);
  EXPECT_EQ(r.dice, 1.0);
  EXPECT_EQ(r.hausdorff, 0.0);
  EXPECT_EQ(r.cmd, 0.0);
}

TEST(Overlap, DisjointSquaresWithGap) {
  // 4x4 squares, columns [2,6) and [10,14): a 4-pixel gap.
  const Mask p = rect(4, 2, 8, 6), g = rect(4, 10, 8, 14);
  const auto r = mask_overlap_metrics(p, g);
  const auto o = oracle::all_pairs_distances(p, g);
  EXPECT_EQ(r.dice, 0.0);
  EXPECT_EQ(r.hausdorff, o.hausdorff);
  EXPECT_EQ(r.cmd, o.cmd);
  EXPECT_EQ(r.hausdorff, 8.0);
}

TEST(Overlap, EmptyPredictionSentinel) {
  Mask g(12, 5);
  g.at(3, 3) = 1;
  const auto r = mask_overlap_metrics(Mask(12, 5), g);
  EXPECT_EQ(r.dice, 0.0);
  EXPECT_DOUBLE_EQ(r.hausdorff, 13.0);
  EXPECT_DOUBLE_EQ(r.cmd, 13.0);
}

TEST(Overlap, Errors) {
  EXPECT_THROW(mask_overlap_metrics(Mask(4, 4), Mask(4, 5)), ValidationError);
  EXPECT_THROW(mask_overlap_metrics(rect(0, 0, 2, 2), Mask(32, 32)), ValidationError);
}

TEST(Overlap, MatchesAllPairsOracleExactly) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 500; ++i) {
    const int h = 1 + static_cast<int>(rng() % 16), w = 1 + static_cast<int>(rng() % 16);
    const Mask g = oracle::random_mask(rng, h, w, false);
    const Mask p = oracle::random_mask(rng, h, w, true);
    const auto r = mask_overlap_metrics(p, g);
    const auto o = oracle::all_pairs_distances(p, g);
    ASSERT_EQ(r.dice, o.dice) << i;
    ASSERT_EQ(r.hausdorff, o.hausdorff) << i;
    ASSERT_EQ(r.cmd, o.cmd) << i;
    ASSERT_GE(r.hausdorff, r.cmd);
    ASSERT_GE(r.cmd, 0.0);
  }
}

TEST(Overlap, DiceSymmetric) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const Mask a = oracle::random_mask(rng, 16, 16, false), b = oracle::random_mask(rng, 16, 16, false);
    const auto ab = mask_overlap_metrics(a, b), ba = mask_overlap_metrics(b, a);
    EXPECT_EQ(ab.dice, ba.dice);
    EXPECT_EQ(ab.hausdorff, ba.hausdorff);
    EXPECT_GE(ab.dice, 0.0);
    EXPECT_LE(ab.dice, 1.0);
  }
}

TEST(Overlap, ContourOfFilledBlockIsItsRing) {
  const Mask c = contour(rect(2, 2, 7, 7));
  EXPECT_EQ(c.count(), 16u);
  EXPECT_EQ(c.at(4, 4), 0);
  EXPECT_EQ(c.at(2, 4), 1);
  // A single row touching the image border is all contour.
  EXPECT_EQ(contour(rect(0, 0, 1, 32)).count(), 32u);
}

TEST(Mse, Examples) {
  LabelRaster a(2, 4), b(2, 4);
  EXPECT_EQ(mask_mse(a, b), 0.0);
  for (int i = 0; i < 4; ++i) b.codes[i] = 1;
  EXPECT_EQ(mask_mse(a, b), 0.5);
  EXPECT_EQ(mask_mse(b, a), 0.5);
  b.codes[0] = 3;
  EXPECT_EQ(mask_mse(a, b), (9.0 + 3.0) / 8.0);
  EXPECT_THROW(mask_mse(a, LabelRaster(4, 2)), ValidationError);
}

TEST(Ap, HandEnumeratedScenarios) {
  for (const auto& s : scenarios::ap_scenarios()) {
    const auto r = average_precision(s.detections, s.ground_truth);
    EXPECT_NEAR(r.mean, s.expected_mean, 1e-12) << s.name;
  }
}

TEST(Ap, ClassesWithoutGroundTruthAreExcluded) {
  const auto r = average_precision({{det(1, 0.9, rect(0, 0, 4, 4)), det(5, 0.9, rect(9, 9, 12, 12))}},
                                   {{{1, rect(0, 0, 4, 4)}}});
  ASSERT_EQ(r.per_class.size(), 1u);
  EXPECT_EQ(r.per_class.at(1), 1.0);
}

TEST(Ap, SectionMeanDiffersFromClassMean) {
  // Section 0 holds classes 1 and 2 (one found), section 1 holds class 1 (found).
  const Mask a = rect(0, 0, 4, 4), b = rect(8, 8, 12, 12);
  const std::vector<std::vector<Detection>> d{{det(1, 0.9, a)}, {det(1, 0.8, a)}};
  const std::vector<std::vector<Instance>> g{{{1, a}, {2, b}}, {{1, a}}};
  EXPECT_DOUBLE_EQ(average_precision(d, g, 0.5, ApAveraging::kClassMean).mean, 0.5);
  EXPECT_DOUBLE_EQ(average_precision(d, g, 0.5, ApAveraging::kSectionMean).mean, 0.75);
}

TEST(Ap, Monotonicity) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<Detection>> d(3);
    std::vector<std::vector<Instance>> g(3);
    for (int s = 0; s < 3; ++s) {
      for (int k = 0; k < 3; ++k) {
        const Mask m = rect(8 * k, 8 * s, 8 * k + 6, 8 * s + 6);
        g[s].push_back({1 + k % 2, m});
        if (rng() % 2) d[s].push_back(det(1 + k % 2, double(rng() % 100) / 100.0, m));
        if (rng() % 3 == 0) d[s].push_back(det(1 + k % 2, double(rng() % 100) / 100.0, rect(30, 30, 32, 32)));
      }
    }
    const double base = average_precision(d, g).mean;
    ASSERT_GE(base, 0.0);
    ASSERT_LE(base, 1.0);

    const std::size_t s = rng() % 3, k = rng() % 3;
    auto more = d;
    more[s].push_back(det(g[s][k].class_id, 1.0, g[s][k].mask));
    // A top-scoring exact match either claims a missed instance or duplicates a
    // hit; only the former can move AP, and only upwards.
    bool missed = true;
    for (const auto& x : d[s]) missed = missed && !(x.class_id == g[s][k].class_id && x.mask == g[s][k].mask);
    if (missed) EXPECT_GE(average_precision(more, g).mean, base) << trial;

    auto junk = d;
    junk[s].push_back(det(g[s][k].class_id, double(rng() % 100) / 100.0, rect(30, 30, 32, 32)));
    EXPECT_LE(average_precision(junk, g).mean, base) << trial;
  }
}

TEST(Ap, TranslationInvariant) {
  const auto s = scenarios::ap_scenarios()[2];
  auto shift = [](const Mask& m) {
    Mask out(m.height, m.width);
    for (int y = 0; y + 3 < m.height; ++y) {
      for (int x = 0; x + 2 < m.width; ++x) out.at(y + 3, x + 2) = m.at(y, x);
    }
    return out;
  };
  auto d = s.detections;
  auto g = s.ground_truth;
  for (auto& sec : d) {
    for (auto& x : sec) x.mask = shift(x.mask);
  }
  for (auto& sec : g) {
    for (auto& x : sec) x.mask = shift(x.mask);
  }
  EXPECT_EQ(average_precision(d, g).mean, average_precision(s.detections, s.ground_truth).mean);
}

TEST(Evaluate, GroundTruthAsPredictionsIsPerfect) {
  const std::vector<std::vector<Instance>> g{{{1, rect(0, 0, 4, 4)}, {2, rect(9, 9, 20, 14)}}, {{1, rect(3, 3, 9, 9)}}};
  std::vector<std::vector<Detection>> d;
  for (const auto& sec : g) {
    d.emplace_back();
    for (const auto& inst : sec) d.back().push_back(det(inst.class_id, 1.0, inst.mask));
  }
  const auto r = evaluate({"a", "b"}, d, g);
  EXPECT_EQ(r.mean_ap, 1.0);
  for (const auto& [c, cs] : r.per_class) {
    EXPECT_EQ(cs.dice, 1.0);
    EXPECT_EQ(cs.hausdorff, 0.0);
    EXPECT_EQ(cs.empty_predictions, 0);
  }
  for (const auto& [id, mse] : r.per_section_mse) EXPECT_EQ(mse, 0.0);
}

TEST(Evaluate, MissingPredictionUsesSentinel) {
  const auto r = evaluate({"a"}, {{}}, {{{4, rect(0, 0, 4, 4)}}});
  EXPECT_EQ(r.per_class.at(4).empty_predictions, 1);
  EXPECT_DOUBLE_EQ(r.per_class.at(4).hausdorff, std::hypot(32.0, 32.0));
  EXPECT_DOUBLE_EQ(r.per_section_mse.at("a"), 16.0 * 16.0 / 1024.0);
}

TEST(Evaluate, HigherScoresWinOnTheRaster) {
  const auto lr = detections_to_raster({det(2, 0.9, rect(0, 0, 2, 2)), det(1, 0.5, rect(0, 0, 2, 4))}, 32, 32);
  EXPECT_EQ(lr.codes[0], 2);
  EXPECT_EQ(lr.codes[3], 1);
}

TEST(Pearson, Examples) {
  EXPECT_DOUBLE_EQ(pearson({1, 2, 3}, {3, 2, 1}), -1.0);
  EXPECT_DOUBLE_EQ(pearson({1, 2, 3}, {2, 4, 6.5}), pearson({2, 4, 6.5}, {1, 2, 3}));
  EXPECT_EQ(pearson({0, 0}, {0, 0}), 1.0);
  EXPECT_TRUE(std::isnan(pearson({1, 1}, {0, 2})));
}

namespace {

EvalResult fake_result(std::vector<std::pair<std::string, double>> mse, double dice) {
  EvalResult r;
  for (auto& [id, v] : mse) r.per_section_mse[id] = v;
  r.per_class[1].dice = dice;
  r.per_class[1].ap = dice;
  r.mean_ap = dice;
  return r;
}

}  // namespace

TEST(Report, SingleMethod) {
  const auto dir = scratch_dir("single");
  comparison_report({{"ours", fake_result({{"s1", 0.1}, {"s2", 0.3}}, 0.8)}}, {"cortex"}, dir);
  const auto table = slurp(dir / "table.csv");
  EXPECT_EQ(table.substr(0, table.find('\n')), "region,ours:ap,ours:dice,ours:hausdorff,ours:cmd,ours:empty_predictions");
  EXPECT_NE(table.find("cortex,0.8,0.8,0,0,0"), std::string::npos);
  EXPECT_FALSE(std::filesystem::exists(dir / "correlation.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "mse_sections.csv"));
}

TEST(Report, CorrelationsAndBestFlag) {
  const auto dir = scratch_dir("three");
  comparison_report({{"a", fake_result({{"s1", 0.1}, {"s2", 0.2}, {"s3", 0.3}}, 0.9)},
                     {"b", fake_result({{"s1", 0.3}, {"s2", 0.2}, {"s3", 0.1}}, 0.7)},
                     {"c", fake_result({{"s1", 0.1}, {"s2", 0.2}, {"s3", 0.3}}, 0.5)}},
                    {"cortex"}, dir);
  const auto corr = slurp(dir / "correlation.csv");
  EXPECT_EQ(corr, "method,a,b,c\na,1,-1,1\nb,-1,1,-1\nc,1,-1,1\n");
  const auto table = slurp(dir / "table.csv");
  EXPECT_NE(table.find("cortex,0.9*,0.7,0.5,0.9*,0.7,0.5"), std::string::npos) << table;
}

TEST(Report, DisjointSectionsRejected) {
  const auto dir = scratch_dir("disjoint");
  try {
    comparison_report({{"a", fake_result({{"s1", 0.1}, {"s2", 0.2}}, 1)}, {"b", fake_result({{"s1", 0.1}, {"s9", 0.2}}, 1)}},
                      {"cortex"}, dir);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("only in a: s2"), std::string::npos);
    EXPECT_NE(what.find("only in b: s9"), std::string::npos);
  }
}
