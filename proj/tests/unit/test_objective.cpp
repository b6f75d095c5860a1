#include <gtest/gtest.h>

#include "metadcseg/objective.hpp"
#include "metadcseg/verify.hpp"

namespace {

using namespace metadcseg;
using diff::Var;
using T = diff::Tape<double>;

LabelMask mask(int h, int w, std::vector<int> labels) {
  LabelMask m(h, w);
  m.labels = std::move(labels);
  return m;
}

TEST(Dice, PerfectBinaryIsZero) {
  const auto m = mask(2, 2, {1, 0, 1, 1});
  EXPECT_EQ(dice_loss(std::vector<double>{1, 0, 1, 1}, m), 0.0);
}

TEST(Dice, BothEmptyIsZero) { EXPECT_EQ(dice_loss(std::vector<double>(4, 0.0), mask(2, 2, {0, 0, 0, 0})), 0.0); }

TEST(Dice, HalfProbabilityHandValue) {
  EXPECT_NEAR(dice_loss(std::vector<double>(4, 0.5), mask(2, 2, {1, 1, 0, 0})), 0.4, 1e-15);
}

TEST(Dice, GraphMatchesValue) {
  T t;
  const std::vector<double> probs{0.5, 0.5, 0.2, 0.8, 0.9, 0.1, 0.4, 0.6};
  Var p = t.constant({2, 2, 2}, probs);
  const auto m = mask(2, 2, {1, 0, 0, 1});
  EXPECT_NEAR(t.scalar(dice_loss<double>(t, p, m)), dice_loss(std::vector<double>{0.5, 0.8, 0.1, 0.6}, m), 1e-15);
}

TEST(Combine, HandTotal) {
  const auto b = combine(1.2, 0.6, 0.4, 0.3, 0.1);
  EXPECT_NEAR(b.total, 1.42, 1e-15);
  EXPECT_EQ(b.lambda1, 0.3);
}

ImageLossTerms two_pixel_terms(T& t) {
  ImageLossTerms lt;
  lt.base_map = t.constant({1, 2}, {0.6, 0.6});
  lt.boundary_map = lt.base_map;
  lt.bd = {1};
  lt.bd_weights = {1.0};
  lt.dice = t.constant({1}, {0.4});
  return lt;
}

TEST(TotalLoss, HandBuiltTwoPixelCase) {
  T t;
  const std::vector<ImageLossTerms> terms{two_pixel_terms(t)};
  const auto v = total_loss<double>(t, terms, 0.3, 0.1);
  const auto b = breakdown(t, v, 0.3, 0.1);
  EXPECT_NEAR(b.base, 1.2, 1e-15);
  EXPECT_NEAR(b.boundary, 0.6, 1e-15);
  EXPECT_NEAR(b.total, 1.42, 1e-15);
  EXPECT_EQ(b.total, b.base + 0.3 * b.boundary + 0.1 * b.dice);
}

TEST(TotalLoss, ZeroLambdasReduceToBase) {
  T t;
  const std::vector<ImageLossTerms> terms{two_pixel_terms(t), two_pixel_terms(t)};
  const auto b = breakdown(t, total_loss<double>(t, terms, 0.0, 0.0), 0.0, 0.0);
  EXPECT_EQ(b.total, b.base);
  EXPECT_NEAR(b.base, 2.4, 1e-15);
}

TEST(TotalLoss, EmptyBoundaryContributesZero) {
  T t;
  auto lt = two_pixel_terms(t);
  lt.bd.clear();
  lt.bd_weights.clear();
  lt.dice = Var{};
  const std::vector<ImageLossTerms> terms{lt};
  const auto b = breakdown(t, total_loss<double>(t, terms, 0.3, 0.1), 0.3, 0.1);
  EXPECT_EQ(b.boundary, 0.0);
  EXPECT_EQ(b.dice, 0.0);
  EXPECT_NEAR(b.total, 1.2, 1e-15);
}

TEST(TotalLoss, MonotoneInLambda1) {
  T t;
  const std::vector<ImageLossTerms> terms{two_pixel_terms(t)};
  double prev = -1;
  for (double l1 : {0.0, 0.1, 0.3, 1.0, 3.0}) {
    const double tot = t.scalar(total_loss<double>(t, terms, l1, 0.1).total);
    EXPECT_GE(tot, prev);
    prev = tot;
  }
}

TEST(TotalLoss, DifferentiableEndToEnd) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    EXPECT_LE(check::network_grad_case(check::LossKind::kTotal, seed).rel_error, 1e-4);
    EXPECT_LE(check::network_grad_case(check::LossKind::kDice, seed).rel_error, 1e-4);
  }
}

}  // namespace
