#include "neural_descent/diffcore.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace neural_descent;

namespace {

Array random_array(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Array a(std::move(shape));
  for (double& v : a.values()) v = u(rng);
  return a;
}

}  // namespace

TEST(DiffcoreForward, SumOfVector) {
  Tape tape;
  const Var x = tape.constant(Array::vector({1, 2, 3}));
  EXPECT_EQ(sum(x).item(), 6.0);
}

TEST(DiffcoreForward, IdentityMatvec) {
  Tape tape;
  const Var eye = tape.constant(Array::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  const Var v = tape.constant(Array::vector({4, 5, 6}));
  const Var y = matmul(eye, v);
  EXPECT_EQ(y.value(), Array::vector({4, 5, 6}));
}

TEST(DiffcoreForward, SigmoidAtZero) {
  Tape tape;
  EXPECT_EQ(sigmoid(tape.constant(0.0)).item(), 0.5);
}

TEST(DiffcoreForward, ShapeMismatchNamesPrimitive) {
  Tape tape;
  const Var a = tape.constant(Array::vector({1, 2, 3}));
  const Var b = tape.constant(Array::vector({1, 2}));
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
  }
  EXPECT_THROW(matmul(a, b), ShapeError);
  EXPECT_THROW(cross(a, b), ShapeError);
}

TEST(DiffcoreForward, SuffixBroadcast) {
  Tape tape;
  const Var m = tape.constant(Array::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  const Var row = tape.constant(Array::vector({10, 20, 30}));
  EXPECT_EQ((m + row).value(), Array::matrix(2, 3, {11, 22, 33, 14, 25, 36}));
}

TEST(DiffcoreGradient, SquareAtThree) {
  Tape tape;
  const Var x = tape.variable(Array::scalar(3.0));
  const auto g = tape.gradient(x * x, {x});
  EXPECT_DOUBLE_EQ(g[0].item(), 6.0);
}

TEST(DiffcoreGradient, ConstantGivesZero) {
  Tape tape;
  const Var x = tape.variable(Array::vector({1, 2}));
  const Var c = tape.constant(5.0) * 2.0;
  const auto g = tape.gradient(c, {x});
  EXPECT_EQ(g[0], Array(Shape{2}, 0.0));
}

TEST(DiffcoreGradient, UnusedInputGetsZero) {
  Tape tape;
  const Var x = tape.variable(Array::vector({1, 2}));
  const Var y = tape.variable(Array::vector({3, 4}));
  const auto g = tape.gradient(sum(x), {x, y});
  EXPECT_EQ(g[0], Array(Shape{2}, 1.0));
  EXPECT_EQ(g[1], Array(Shape{2}, 0.0));
}

TEST(DiffcoreGradient, NonScalarOutputRejected) {
  Tape tape;
  const Var x = tape.variable(Array::vector({1, 2}));
  EXPECT_THROW(tape.gradient(x * 2.0, {x}), ShapeError);
}

TEST(DiffcoreGradient, SubgradientConventions) {
  Tape tape;
  const Var x = tape.variable(Array::vector({0.0, 0.0}));
  const auto g_abs = tape.gradient(sum(abs(x)), {x});
  EXPECT_EQ(g_abs[0], Array(Shape{2}, 0.0));
  const auto g_norm = tape.gradient(sum(norm_rows(reshape(x, {1, 2}))), {x});
  EXPECT_EQ(g_norm[0], Array(Shape{2}, 0.0));
  const auto g_sqrt = tape.gradient(sum(sqrt(x)), {x});
  EXPECT_EQ(g_sqrt[0], Array(Shape{2}, 0.0));
  // Ties select the first operand.
  const Var a = tape.variable(Array::scalar(1.0));
  const Var b = tape.variable(Array::scalar(1.0));
  const auto g_min = tape.gradient(minimum(a, b), {a, b});
  EXPECT_EQ(g_min[0].item(), 1.0);
  EXPECT_EQ(g_min[1].item(), 0.0);
}

TEST(CheckGradient, SquaredNorm) {
  const double err = check_gradient([](const Var& x) { return sum(x * x); }, Array::vector({1, -2}), 1e-6);
  EXPECT_LT(err, 1e-7);
}

TEST(CheckGradient, ConstantFunction) {
  const double err = check_gradient([](const Var& x) { return x.tape().constant(3.0) + 0.0; }, Array::vector({1, -2}), 1e-6);
  EXPECT_EQ(err, 0.0);
}

TEST(CheckGradient, NonFiniteRejected) {
  EXPECT_THROW(check_gradient([](const Var& x) { return sum(log(x)); }, Array::vector({-1.0}), 1e-6), std::domain_error);
  EXPECT_THROW(check_gradient([](const Var& x) { return sum(x); }, Array::vector({1.0}), 0.0), std::invalid_argument);
}

// Every primitive at 10 seeded random points.
TEST(CheckGradient, AllPrimitivesAtRandomPoints) {
  std::mt19937_64 rng(1234);
  struct Case {
    const char* name;
    std::function<Var(const Var&)> fn;
    Shape shape;
    double lo, hi;
  };
  auto weights = [](const Var& x) {
    Array w(x.shape());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.17 * static_cast<double>(i % 7);
    return x.tape().constant(w);
  };
  const std::vector<Case> cases = {
      {"add", [&](const Var& x) { return sum((x + x * 2.0) * weights(x)); }, {2, 3}, -1, 1},
      {"sub_div", [&](const Var& x) { return sum(weights(x) / (x - 3.0)); }, {5}, -1, 1},
      {"exp_log", [&](const Var& x) { return sum(log(exp(x) + 1.0) * weights(x)); }, {4}, -2, 2},
      {"tanh", [&](const Var& x) { return sum(tanh(x) * weights(x)); }, {4}, -2, 2},
      {"sigmoid", [&](const Var& x) { return sum(sigmoid(x) * weights(x)); }, {4}, -3, 3},
      {"softplus", [&](const Var& x) { return sum(softplus(x) * weights(x)); }, {4}, -3, 3},
      {"sqrt", [&](const Var& x) { return sum(sqrt(x) * weights(x)); }, {4}, 0.5, 2},
      {"power", [&](const Var& x) { return sum(power(x, 2.5) * weights(x)); }, {4}, 0.5, 2},
      {"square", [&](const Var& x) { return sum(square(x) * weights(x)); }, {4}, -2, 2},
      {"matmul",
       [&](const Var& x) {
         const Var m = reshape(x, {2, 3});
         return sum(matmul(m, transpose(m)) * x.tape().constant(Array::matrix(2, 2, {1, 2, 3, 4})));
       },
       {6}, -1, 1},
      {"matvec", [&](const Var& x) { return sum(square(matmul(reshape(x, {2, 2}), slice(x, 0, 1, 3)))); }, {4}, -1, 1},
      {"concat_slice",
       [&](const Var& x) {
         const Var c = concat({x, x * x}, 0);
         return sum(slice(reshape(c, {2, 4}), 1, 1, 3) * 1.5) + sum(stack({x, x}) * 0.5);
       },
       {4}, -1, 1},
      {"sum_axis", [&](const Var& x) { return sum(square(sum(reshape(x, {2, 3}), 0))); }, {6}, -1, 1},
      {"mean", [&](const Var& x) { return mean(x * weights(x)); }, {5}, -1, 1},
      {"cross", [&](const Var& x) { return sum(cross(slice(x, 0, 0, 3), slice(x, 0, 3, 6)) * weights(slice(x, 0, 0, 3))); }, {6}, -1, 1},
      {"normalize", [&](const Var& x) { return sum(normalize(reshape(x, {2, 3})) * weights(reshape(x, {2, 3}))); }, {6}, 0.2, 1},
      {"norm_rows", [&](const Var& x) { return sum(norm_rows(reshape(x, {2, 3})) * weights(x.tape().constant(Array(Shape{2})))); }, {6}, 0.2, 1},
      {"abs", [&](const Var& x) { return sum(abs(x) * weights(x)); }, {4}, 0.1, 1},
      {"min_max", [&](const Var& x) { return sum(minimum(x, x * 0.5 + 0.2) + maximum(x * x, x)); }, {4}, -1, 1},
      {"axis_angle", [&](const Var& x) { return sum(axis_angle_to_matrix(x) * x.tape().constant(Array::matrix(3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9}))); }, {3}, -2, 2},
      {"axis_angle_small", [&](const Var& x) { return sum(axis_angle_to_matrix(x * 1e-3) * x.tape().constant(Array::matrix(3, 3, {1, -2, 3, 4, 5, -6, 7, 8, 9}))); }, {3}, -2, 2},
  };
  for (const Case& c : cases) {
    for (int trial = 0; trial < 10; ++trial) {
      const Array point = random_array(c.shape, rng, c.lo, c.hi);
      EXPECT_LT(check_gradient(c.fn, point, 1e-6), 1e-4) << c.name << " trial " << trial;
    }
  }
}

TEST(AxisAngle, MatchesClosedForm) {
  Tape tape;
  const Var R = axis_angle_to_matrix(tape.constant(Array::vector({0, 0, M_PI / 2})));
  const Array expected = Array::matrix(3, 3, {0, -1, 0, 1, 0, 0, 0, 0, 1});
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(R.value()[i], expected[i], 1e-15);
  const Var I = axis_angle_to_matrix(tape.constant(Array::vector({0, 0, 0})));
  EXPECT_EQ(I.value(), Array::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
}

TEST(DiffcoreInvariants, ReplayIsBitIdentical) {
  Tape tape;
  const Var x = tape.variable(Array::vector({0.3, -1.2, 2.0}));
  const Var y = sum(tanh(x) * exp(x)) + sum(normalize(x));
  const auto g1 = tape.gradient(y, {x});
  const auto g2 = tape.gradient(y, {x});
  EXPECT_EQ(g1[0], g2[0]);
}

TEST(DiffcoreInvariants, Linearity) {
  std::mt19937_64 rng(7);
  const double a = 1.7;
  const double b = -0.4;
  auto f = [](const Var& x) { return sum(tanh(x) * x); };
  auto g = [](const Var& x) { return sum(exp(x * 0.5)); };
  for (int trial = 0; trial < 10; ++trial) {
    const Array p = random_array({4}, rng);
    Tape tape;
    const Var x = tape.variable(p);
    const Var fx = f(x);
    const Var gx = g(x);
    const Array gf = tape.gradient(fx, {x})[0];
    const Array gg = tape.gradient(gx, {x})[0];
    const Array gc = tape.gradient(fx * a + gx * b, {x})[0];
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(gc[i], a * gf[i] + b * gg[i], 1e-14);
  }
}
