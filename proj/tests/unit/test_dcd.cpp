#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "metadcseg/dcd.hpp"
#include "metadcseg/verify.hpp"

namespace {

using namespace metadcseg;

TEST(Edges, ConstantImageHasNone) {
  EXPECT_TRUE(detect_edges(ImagePlane(8, 8, 1, 0.4), 0.1).empty());
}

TEST(Edges, VerticalStepSelectsStepColumns) {
  ImagePlane x(6, 8);
  for (int y = 0; y < 6; ++y) {
    for (int c = 4; c < 8; ++c) x.at(y, c) = 1.0;
  }
  const auto e = detect_edges(x, 0.25);
  ASSERT_FALSE(e.empty());
  for (int p : e) {
    const int col = p % 8;
    EXPECT_TRUE(col == 3 || col == 4) << col;
  }
}

TEST(Edges, CountBoundedByPercentile) {
  Rng r(1);
  for (int it = 0; it < 20; ++it) {
    ImagePlane x(7, 9);
    for (double& v : x.values) v = r.uniform();
    const double pct = r.uniform(0.01, 0.9);
    EXPECT_LE(detect_edges(x, pct).size(), static_cast<std::size_t>(std::ceil(pct * 63)));
  }
  EXPECT_THROW(detect_edges(ImagePlane(4, 4), 1.0), std::invalid_argument);
}

TEST(Regions, ThresholdsAndEdges) {
  const std::vector<double> p{0.9, 0.5, 0.9, 0.1, 0.35};
  const std::vector<int> edges{2};
  const auto r = decompose_regions(p, 0.7, edges);
  EXPECT_EQ(r.fg, (std::vector<int>{0}));
  EXPECT_EQ(r.bg, (std::vector<int>{3}));
  EXPECT_EQ(r.bd, (std::vector<int>{1, 2, 4}));
  EXPECT_EQ(r.edge, edges);
  EXPECT_THROW(decompose_regions(p, 0.5, edges), std::invalid_argument);
}

TEST(Regions, PartitionProperty) {
  Rng r(7);
  for (int it = 0; it < 50; ++it) {
    std::vector<double> p(40);
    for (double& v : p) v = r.uniform();
    std::vector<int> edges;
    for (int i = 0; i < 40; ++i) {
      if (r.uniform() < 0.2) edges.push_back(i);
    }
    const auto d = decompose_regions(p, r.uniform(0.55, 0.95), edges);
    std::set<int> all;
    for (const auto* s : {&d.fg, &d.bg, &d.bd}) all.insert(s->begin(), s->end());
    EXPECT_EQ(all.size(), 40u);
    EXPECT_EQ(d.fg.size() + d.bg.size() + d.bd.size(), 40u);
    for (int e : edges) EXPECT_TRUE(std::binary_search(d.bd.begin(), d.bd.end(), e));
  }
}

RegionDecomposition with_sets(std::vector<int> fg, std::vector<int> bg, std::vector<int> bd) {
  RegionDecomposition r;
  r.fg = std::move(fg);
  r.bg = std::move(bg);
  r.bd = std::move(bd);
  return r;
}

TEST(Centers, GammaWeightedMean) {
  const std::vector<double> feats{0, 0, 4, 0};  // 2 pixels, D = 2
  const std::vector<double> gamma{1, 3};
  CenterTracker tr(2);
  const auto c = weighted_centers(feats, 2, gamma, with_sets({0, 1}, {}, {}), tr, CenterOptions{1});
  EXPECT_FALSE(c.used_fallback[kFg]);
  EXPECT_DOUBLE_EQ(c.c[kFg][0], 3.0);
  EXPECT_DOUBLE_EQ(c.c[kFg][1], 0.0);
  EXPECT_TRUE(c.used_fallback[kBg]);
  EXPECT_TRUE(c.used_fallback[kBd]);
}

TEST(Centers, EqualGammaIsPlainMean) {
  Rng r(2);
  std::vector<double> feats(12 * 3);
  for (double& v : feats) v = r.normal();
  std::vector<int> all(12);
  std::iota(all.begin(), all.end(), 0);
  CenterTracker tr(3);
  const auto c = weighted_centers(feats, 3, std::vector<double>(12, 0.37), with_sets(all, {}, {}), tr, {10});
  for (int d = 0; d < 3; ++d) {
    double m = 0;
    for (int p = 0; p < 12; ++p) m += feats[p * 3 + d];
    EXPECT_NEAR(c.c[kFg][d], m / 12, 1e-14);
  }
}

TEST(Centers, NinePixelsFallBack) {
  std::vector<double> feats(20, 1.0);
  std::vector<int> nine(9);
  std::iota(nine.begin(), nine.end(), 0);
  CenterTracker tr(2);
  const auto c = weighted_centers(feats, 2, std::vector<double>(10, 1.0), with_sets(nine, {9}, {}), tr);
  EXPECT_TRUE(c.used_fallback[kFg]);
  EXPECT_EQ(c.c[kFg], (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(c.fallbacks(), 3);
}

TEST(Centers, FallbackUsesRunningMean) {
  CenterTracker tr(1);
  Centers a;
  a.c = {std::vector<double>{2.0}, std::vector<double>{0.0}, std::vector<double>{0.0}};
  a.used_fallback = {false, true, true};
  tr.observe(a);
  a.c[kFg] = {4.0};
  tr.observe(a);
  EXPECT_EQ(tr.count(kFg), 2);
  EXPECT_EQ(tr.count(kBg), 0);
  EXPECT_DOUBLE_EQ(tr.default_center(kFg)[0], 3.0);
  const auto c = weighted_centers(std::vector<double>{1.0}, 1, std::vector<double>{1.0},
                                  with_sets({0}, {}, {}), tr, {10});
  EXPECT_DOUBLE_EQ(c.c[kFg][0], 3.0);
}

TEST(Dcd, HandValue) {
  Centers c;
  c.c = {std::vector<double>{1, 0}, std::vector<double>{-1, 0}, std::vector<double>{0, 0}};
  const std::vector<double> h{0, 1};
  const std::vector<int> bd{0};
  const auto v = dcd_map(h, 2, c, bd);
  EXPECT_NEAR(v.raw[0], 2.0 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(v.raw[0], v.clipped[0]);
}

TEST(Dcd, AtBoundaryCenterClips) {
  Centers c;
  c.c = {std::vector<double>{1, 0}, std::vector<double>{-1, 0}, std::vector<double>{0, 0}};
  const auto v = dcd_map(std::vector<double>{0, 0}, 2, c, std::vector<int>{0});
  EXPECT_GT(v.raw[0], 100.0);
  EXPECT_EQ(v.clipped[0], 100.0);
}

TEST(Dcd, AtForegroundCenterIsZero) {
  Centers c;
  c.c = {std::vector<double>{1, 0}, std::vector<double>{-1, 0}, std::vector<double>{0, 0}};
  EXPECT_EQ(dcd_map(std::vector<double>{1, 0}, 2, c, std::vector<int>{0}).clipped[0], 0.0);
}

TEST(Dcd, BoundsOnRandomFields) {
  const auto st = check::dcd_bound_sweep(300, 3);
  EXPECT_EQ(st.pre_clip_violations, 0);
  EXPECT_EQ(st.post_clip_violations, 0);
  EXPECT_EQ(st.center_violations, 0);
  EXPECT_GT(st.bd_pixels, 0);
}

TEST(BoundaryWeights, EqualValuesSplitEvenly) {
  const auto w = boundary_weights(std::vector<double>{2.0, 2.0}, 0.6);
  EXPECT_DOUBLE_EQ(w[0], 0.5);
  EXPECT_DOUBLE_EQ(w[1], 0.5);
}

TEST(BoundaryWeights, OneThirdTwoThirds) {
  const double tau = 0.8;
  const auto w = boundary_weights(std::vector<double>{0.0, std::log(2.0) * tau}, tau);
  EXPECT_NEAR(w[0], 1.0 / 3, 1e-15);
  EXPECT_NEAR(w[1], 2.0 / 3, 1e-15);
}

TEST(BoundaryWeights, SumToOneAndShiftInvariant) {
  Rng r(4);
  for (int it = 0; it < 100; ++it) {
    std::vector<double> d(1 + r.below(30));
    for (double& v : d) v = r.uniform(0, 100);
    const auto w = boundary_weights(d, 0.6);
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
    for (double v : w) EXPECT_GT(v, 0.0);
    auto s = d;
    for (double& v : s) v += 17.5;
    const auto ws = boundary_weights(s, 0.6);
    for (std::size_t j = 0; j < w.size(); ++j) EXPECT_NEAR(w[j], ws[j], 1e-14);
  }
}

TEST(BoundaryWeights, EmptyBoundary) { EXPECT_TRUE(boundary_weights(std::vector<double>{}, 0.6).empty()); }

TEST(BoundaryWeightsOp, ValuesMatchDetachedPath) {
  Rng r(8);
  const int side = 6, dim = 3;
  std::vector<double> feats(side * side * dim), prob(side * side), gamma(side * side);
  for (double& v : feats) v = r.normal();
  for (double& v : prob) v = r.uniform();
  for (double& v : gamma) v = r.uniform(0.1, 1.0);
  ImagePlane img(side, side);
  for (double& v : img.values) v = r.uniform();
  const auto regions = decompose_regions(prob, 0.7, detect_edges(img, 0.2));
  CenterTracker tr(dim);
  const CenterOptions copt{3};
  const auto centers = weighted_centers(feats, dim, gamma, regions, tr, copt);
  const auto expect = boundary_weights(dcd_map(feats, dim, centers, regions.bd).clipped, 0.6);

  diff::Tape<double> t;
  diff::Var x = t.variable({side, side, dim}, feats);
  const auto w = t.value(boundary_weights_op<double>(t, x, gamma, regions, tr, 0.6, copt));
  ASSERT_EQ(w.size(), expect.size());
  for (std::size_t j = 0; j < w.size(); ++j) EXPECT_NEAR(w[j], expect[j], 1e-14);
}

TEST(BoundaryWeightsOp, GradientMatchesFiniteDifferences) {
  Rng r(12);
  const int side = 6, dim = 2;
  const std::size_t px = side * side;
  for (int it = 0; it < 5; ++it) {
    std::vector<double> feats(px * dim), prob(px), gamma(px), coef(px);
    for (double& v : feats) v = r.normal();
    for (double& v : prob) v = r.uniform();
    for (double& v : gamma) v = r.uniform(0.1, 1.0);
    for (double& v : coef) v = r.normal();
    ImagePlane img(side, side);
    for (double& v : img.values) v = r.uniform();
    const auto regions = decompose_regions(prob, 0.7, detect_edges(img, 0.2));
    CenterTracker tr(dim);
    std::vector<std::size_t> bd(regions.bd.begin(), regions.bd.end());
    diff::ScalarFn<double> f = [&](diff::Tape<double>& t, diff::Var th) {
      diff::Var x = diff::slice(t, th, 0, {side, side, dim});
      diff::Var w = boundary_weights_op<double>(t, x, gamma, regions, tr, 0.6, CenterOptions{3});
      return diff::sum(t, diff::mul(t, w, diff::gather(t, t.constant({side, side}, coef), bd)));
    };
    const auto ag = diff::value_and_grad<double>(f, feats).grad;
    const auto fd = diff::finite_diff_grad(f, feats, 1e-6);
    EXPECT_LE(diff::relative_error(ag, fd), 1e-5) << "case " << it;
  }
}

}  // namespace
