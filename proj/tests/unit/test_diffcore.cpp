#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "metadcseg/datakit.hpp"
#include "metadcseg/diffcore.hpp"
#include "metadcseg/verify.hpp"

namespace {

using metadcseg::Rng;
using namespace metadcseg::diff;
using T = Tape<double>;

TEST(ValueAndGrad, SquareOfScalar) {
  ScalarFn<double> f = [](T& t, Var th) { return sum(t, mul(t, th, th)); };
  const std::vector<double> theta{3.0};
  const auto vg = value_and_grad<double>(f, theta);
  EXPECT_DOUBLE_EQ(vg.value, 9.0);
  ASSERT_EQ(vg.grad.size(), 1u);
  EXPECT_DOUBLE_EQ(vg.grad[0], 6.0);
}

TEST(ValueAndGrad, CrossEntropyOfUniformLogits) {
  ScalarFn<double> f = [](T& t, Var th) {
    const std::vector<int> label{0};
    return sum(t, cross_entropy(t, slice(t, th, 0, {1, 1, 2}), std::span<const int>(label)));
  };
  const std::vector<double> logits{0.0, 0.0};
  const auto vg = value_and_grad<double>(f, logits);
  EXPECT_NEAR(vg.value, std::log(2.0), 1e-15);
  EXPECT_NEAR(vg.grad[0], -0.5, 1e-15);
  EXPECT_NEAR(vg.grad[1], 0.5, 1e-15);
}

TEST(FiniteDiff, SquareMatchesSix) {
  const auto g = finite_diff_grad([](std::span<const double> th) { return th[0] * th[0]; },
                                  std::vector<double>{3.0}, 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-8);
}

TEST(FiniteDiff, ConstantIsZero) {
  const auto g = finite_diff_grad([](std::span<const double>) { return 4.25; }, std::vector<double>(7, 1.0), 1e-5);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDiff, QuadraticMatchesAnalytic) {
  Rng r(5);
  constexpr int n = 10;
  std::vector<double> A(n * n), b(n), th(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) A[i * n + j] = A[j * n + i] = r.uniform(-1, 1);
    b[i] = r.uniform(-1, 1);
    th[i] = r.uniform(-2, 2);
  }
  auto f = [&](std::span<const double> x) {
    double v = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) v += 0.5 * x[i] * A[i * n + j] * x[j];
      v += b[i] * x[i];
    }
    return v;
  };
  const auto g = finite_diff_grad(f, th, 1e-5);
  for (int i = 0; i < n; ++i) {
    double expect = b[i];
    for (int j = 0; j < n; ++j) expect += A[i * n + j] * th[j];
    EXPECT_NEAR(g[i], expect, 1e-6);
  }
}

class PrimitiveGrad : public ::testing::TestWithParam<std::string> {};

TEST_P(PrimitiveGrad, MatchesCentralDifferences) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    EXPECT_LE(metadcseg::check::primitive_grad_error(GetParam(), seed), 1e-6) << "seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, PrimitiveGrad, ::testing::ValuesIn(metadcseg::check::primitive_names()),
                         [](const auto& info) { return info.param; });

TEST(Tape, BackwardOfSumIsSumOfBackwards) {
  Rng r(9);
  std::vector<double> x(12);
  for (double& v : x) v = r.normal();
  ScalarFn<double> f1 = [](T& t, Var th) { return sum(t, mul(t, th, th)); };
  ScalarFn<double> f2 = [](T& t, Var th) { return norm(t, th); };
  ScalarFn<double> both = [&](T& t, Var th) { return add(t, f1(t, th), f2(t, th)); };
  const auto a = value_and_grad<double>(f1, x).grad;
  const auto b = value_and_grad<double>(f2, x).grad;
  const auto s = value_and_grad<double>(both, x).grad;
  for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(s[k], a[k] + b[k], 1e-14);
}

TEST(Tape, VisitsEachRecordOnce) {
  T t;
  Var x = t.variable({3}, {1.0, 2.0, 3.0});
  Var y = mul(t, x, x);
  Var z = add(t, y, x);
  Var s = sum(t, z);
  t.backward(s);
  EXPECT_EQ(t.backward_visits(), 3u);
  const auto g = t.grad(x);
  EXPECT_DOUBLE_EQ(g[0], 3.0);
  EXPECT_DOUBLE_EQ(g[2], 7.0);
}

TEST(Tape, DeterministicGradients) {
  Rng r(2);
  std::vector<double> x(30);
  for (double& v : x) v = r.normal();
  ScalarFn<double> f = [](T& t, Var th) {
    Var img = slice(t, th, 0, {2, 3, 5});
    return sum(t, softmax(t, relu(t, img)));
  };
  const auto a = value_and_grad<double>(f, x);
  const auto b = value_and_grad<double>(f, x);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.grad, b.grad);
}

TEST(Tape, NonFiniteValueFaultsWithOpName) {
  T t;
  Var a = t.variable({2}, {1.0, 2.0});
  Var b = t.constant({2}, {1.0, 0.0});
  try {
    div(t, a, b);
    FAIL() << "expected NumericFault";
  } catch (const NumericFault& e) {
    EXPECT_EQ(e.op(), "div");
    EXPECT_EQ(e.index(), 1u);
  }
}

TEST(Tape, ShapeMismatchThrows) {
  T t;
  Var a = t.variable({2}, {1.0, 2.0});
  Var b = t.variable({3}, {1.0, 2.0, 3.0});
  EXPECT_THROW(add(t, a, b), ShapeError);
}

TEST(Tape, ForwardTangentIsJacobianVectorProduct) {
  Rng r(4);
  std::vector<double> x(24), v(24);
  for (double& e : x) e = r.normal();
  for (double& e : v) e = r.normal();
  T t;
  Var th = t.variable({24}, x);
  Var img = slice(t, th, 0, {2, 4, 3});
  Var out = softmax(t, affine(t, img, 2.0, 0.1));
  const T::Seed seed{th, v};
  t.forward_tangents(std::span(&seed, 1));
  const auto tan = t.tangent(out);
  // Compare with a central difference along v.
  auto eval = [&](double s) {
    std::vector<double> y(24);
    for (int k = 0; k < 24; ++k) y[k] = x[k] + s * v[k];
    T u;
    Var a = u.variable({24}, y);
    return u.value(softmax(u, affine(u, slice(u, a, 0, {2, 4, 3}), 2.0, 0.1)));
  };
  const auto up = eval(1e-5), dn = eval(-1e-5);
  std::vector<double> fd(up.size());
  for (std::size_t k = 0; k < fd.size(); ++k) fd[k] = (up[k] - dn[k]) / 2e-5;
  EXPECT_LE(relative_error(tan, fd), 1e-8);
}

TEST(ParamVector, LayoutIsContiguous) {
  ParamVector p;
  p.add("a", {2, 3});
  p.add("b", {4});
  EXPECT_EQ(p.size(), 10u);
  EXPECT_EQ(p.segment("b").offset, 6u);
  EXPECT_THROW(p.segment("c"), std::out_of_range);
}

TEST(Arena, TracksTapeBytes) {
  ArenaStats::reset_peak();
  const auto before = ArenaStats::current_bytes();
  {
    T t;
    t.variable({1000}, std::vector<double>(1000, 1.0));
    EXPECT_GE(ArenaStats::current_bytes(), before + 1000 * sizeof(double));
  }
  EXPECT_EQ(ArenaStats::current_bytes(), before);
  EXPECT_GE(ArenaStats::peak_bytes(), before + 1000 * sizeof(double));
}

TEST(RelativeError, NormWise) {
  const std::vector<double> a{1.0, 100.0}, b{1.5, 100.0};
  EXPECT_DOUBLE_EQ(relative_error(a, b), 0.005);
}

}  // namespace
