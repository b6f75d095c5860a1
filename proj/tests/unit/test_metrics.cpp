#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "metadcseg/metrics.hpp"
#include "metadcseg/noisegen.hpp"

namespace {

using namespace metadcseg;

LabelMask mask(int h, int w, std::vector<int> labels) {
  LabelMask m(h, w);
  m.labels = std::move(labels);
  return m;
}

LabelMask random_mask(Rng& r, int h, int w, int classes = 2) {
  LabelMask m(h, w);
  for (int& v : m.labels) v = static_cast<int>(r.below(classes));
  return m;
}

TEST(Dsc, Fixtures) {
  const auto a = mask(2, 4, {1, 1, 1, 1, 0, 0, 0, 0});
  const auto b = mask(2, 4, {0, 0, 0, 0, 1, 1, 1, 1});
  const auto c = mask(2, 4, {0, 0, 1, 1, 1, 1, 0, 0});
  EXPECT_EQ(dsc(a, a), 1.0);
  EXPECT_EQ(dsc(a, b), 0.0);
  EXPECT_NEAR(dsc(a, c), 0.5, 1e-12);
  EXPECT_EQ(dsc(LabelMask(2, 2), LabelMask(2, 2)), 1.0);
}

TEST(Dsc, SymmetricAndComplementsCorruptionRate) {
  Rng r(1);
  for (int it = 0; it < 100; ++it) {
    const auto a = random_mask(r, 5, 6), b = random_mask(r, 5, 6);
    EXPECT_EQ(dsc(a, b), dsc(b, a));
    EXPECT_NEAR(dsc(a, b), 1.0 - corruption_rate(a, b), 1e-12);
  }
}

TEST(Miou, Fixtures) {
  const auto a = mask(2, 2, {0, 1, 1, 0});
  EXPECT_EQ(miou(a, a, 2), 1.0);
  EXPECT_NEAR(miou(mask(2, 1, {0, 1}), mask(2, 1, {0, 0}), 2), 0.25, 1e-12);
  EXPECT_EQ(miou(mask(1, 3, {1, 1, 1}), mask(1, 3, {0, 0, 0}), 2), 0.0);
}

TEST(Miou, PerClassAndForegroundOnly) {
  const auto res = iou(mask(2, 1, {0, 1}), mask(2, 1, {0, 0}), 2);
  ASSERT_EQ(res.per_class.size(), 2u);
  EXPECT_NEAR(res.per_class[0], 0.5, 1e-12);
  EXPECT_EQ(res.per_class[1], 0.0);
  EXPECT_EQ(miou(mask(2, 1, {0, 1}), mask(2, 1, {0, 0}), 2, true), 0.0);
  // Class 2 absent everywhere counts as a perfect score.
  EXPECT_NEAR(miou(mask(2, 1, {0, 1}), mask(2, 1, {0, 0}), 3), (0.5 + 0 + 1) / 3, 1e-12);
}

TEST(Miou, InvariantUnderRelabeling) {
  Rng r(2);
  const int perm[3] = {2, 0, 1};
  for (int it = 0; it < 50; ++it) {
    auto a = random_mask(r, 4, 4, 3), b = random_mask(r, 4, 4, 3);
    const double before = miou(a, b, 3);
    for (int& v : a.labels) v = perm[v];
    for (int& v : b.labels) v = perm[v];
    EXPECT_NEAR(miou(a, b, 3), before, 1e-12);
  }
}

TEST(Hausdorff, Fixtures) {
  const auto a = mask(3, 3, {0, 1, 0, 1, 1, 1, 0, 1, 0});
  EXPECT_EQ(hausdorff(a, a), 0.0);

  LabelMask p(4, 5), g(4, 5);
  p.at(0, 0) = 1;
  g.at(3, 4) = 1;
  EXPECT_NEAR(hausdorff(p, g), 5.0, 1e-12);

  LabelMask q(3, 4);
  q.at(1, 1) = 1;
  EXPECT_NEAR(hausdorff(LabelMask(3, 4), q), std::sqrt(13.0), 1e-12);
  EXPECT_EQ(hausdorff(LabelMask(3, 4), LabelMask(3, 4)), 0.0);
}

TEST(Hausdorff, SymmetricAndMatchesBruteForce) {
  Rng r(3);
  for (int it = 0; it < 50; ++it) {
    const auto a = random_mask(r, 7, 6), b = random_mask(r, 7, 6);
    const double h = hausdorff(a, b);
    EXPECT_EQ(h, hausdorff(b, a));
    const auto ba = boundary_pixels(a), bb = boundary_pixels(b);
    if (ba.empty() || bb.empty()) continue;
    auto directed = [](const std::vector<int>& s, const std::vector<int>& t) {
      double worst = 0;
      for (int i : s) {
        double best = 1e300;
        for (int j : t) best = std::min(best, std::hypot(i / 6 - j / 6, i % 6 - j % 6));
        worst = std::max(worst, best);
      }
      return worst;
    };
    EXPECT_NEAR(h, std::max(directed(ba, bb), directed(bb, ba)), 1e-12);
  }
}

TEST(BoundaryPixels, InteriorExcluded) {
  LabelMask m(5, 5);
  for (int y = 0; y < 5; ++y) {
    for (int x = 0; x < 5; ++x) m.at(y, x) = 1;
  }
  m.at(0, 0) = 0;
  const auto b = boundary_pixels(m);
  // 15 remaining rim pixels plus (1,1), which touches the hole.
  EXPECT_EQ(b.size(), 16u);
  EXPECT_EQ(std::count(b.begin(), b.end(), 6), 1);
  EXPECT_EQ(std::count(b.begin(), b.end(), 12), 0);
}

TEST(CostEfficiency, Fixtures) {
  EXPECT_EQ(cost_efficiency(0.0, 2.0, 1.0, 1.0, 1.0), 0.0);
  EXPECT_NEAR(cost_efficiency(3.0, 2.0, 1.0, 1.0, 1.0), 3.0, 1e-12);
  EXPECT_NEAR(cost_efficiency(1.11, 3.2, 2.8, 7.8, 7.2), 1.11 / ((3.2 / 2.8) * (7.8 / 7.2) - 1), 1e-12);
  EXPECT_THROW(cost_efficiency(1.0, 2.0, 2.0, 3.0, 3.0), std::domain_error);
  EXPECT_THROW(cost_efficiency(1.0, 2.0, 0.0, 3.0, 3.0), std::invalid_argument);
}

TEST(Summary, MeansAndJsonl) {
  const auto s = summarize({EvalRecord{1, 0.5, 0.6, 2.0}, EvalRecord{2, 1.0, 0.8, 0.0}});
  EXPECT_DOUBLE_EQ(s.mean_miou, 0.75);
  EXPECT_DOUBLE_EQ(s.mean_dsc, 0.7);
  EXPECT_DOUBLE_EQ(s.mean_hd, 1.0);
  std::ostringstream os;
  write_jsonl(os, s.records[0]);
  const auto j = nlohmann::json::parse(os.str());
  EXPECT_EQ(j["id"], 1);
  EXPECT_EQ(j["hd"], 2.0);
}

}  // namespace
