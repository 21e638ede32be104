#include "stride/autodiff.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "stride/common.hpp"
#include "stride/nets.hpp"
#include "test_util.hpp"

namespace stride {
namespace {

using ad::Dual;
using ad::Tape;
using ad::Var;
using testutil::finite_diff_grad;
using testutil::rel_err;

TEST(Gradient, SquareAtThree) {
  Vec x = {3.0};
  Vec g = ad::gradient([](Tape&, std::span<const Var> v) { return v[0] * v[0]; }, x);
  EXPECT_DOUBLE_EQ(g[0], 6.0);
}

TEST(Gradient, SoftplusAtZero) {
  Vec x = {0.0};
  Vec g = ad::gradient([](Tape&, std::span<const Var> v) { return softplus(v[0]); }, x);
  EXPECT_DOUBLE_EQ(g[0], 0.5);
}

TEST(Gradient, ProductChainRule) {
  Vec x = {2.0, 0.0};
  Vec g = ad::gradient([](Tape&, std::span<const Var> v) { return v[0] * sin(v[1]); }, x);
  EXPECT_DOUBLE_EQ(g[0], 0.0);
  EXPECT_DOUBLE_EQ(g[1], 2.0);
}

TEST(Gradient, QuadraticNormGivesParams) {
  Vec theta = {0.3, -1.2, 2.5};
  auto [val, g] = ad::value_and_grad(
      [](Tape&, std::span<const Var> v) {
        Var s = v[0] * v[0];
        for (size_t i = 1; i < v.size(); ++i) s += v[i] * v[i];
        return s * 0.5;
      },
      theta);
  EXPECT_NEAR(val, 0.5 * norm2(theta), 1e-15);
  for (size_t i = 0; i < theta.size(); ++i) EXPECT_DOUBLE_EQ(g[i], theta[i]);
}

TEST(Gradient, ConstantLossHasZeroGradient) {
  Vec theta = {1.0, 2.0};
  Vec g = ad::gradient([](Tape& t, std::span<const Var>) { return t.constant(7.0); }, theta);
  EXPECT_DOUBLE_EQ(g[0], 0.0);
  EXPECT_DOUBLE_EQ(g[1], 0.0);
}

// Every primitive against central finite differences at several points.
TEST(Primitives, MatchFiniteDifferences) {
  struct Case {
    const char* name;
    std::function<Var(std::span<const Var>)> f;
    std::function<double(std::span<const double>)> fd;
    Vec points;
  };
  auto at = [](double a, double b) { return Vec{a, b}; };
  std::vector<Case> cases = {
      {"add", [](auto v) { return v[0] + v[1]; }, [](auto x) { return x[0] + x[1]; }, at(0.7, -1.3)},
      {"sub", [](auto v) { return v[0] - v[1]; }, [](auto x) { return x[0] - x[1]; }, at(0.7, -1.3)},
      {"mul", [](auto v) { return v[0] * v[1]; }, [](auto x) { return x[0] * x[1]; }, at(0.7, -1.3)},
      {"div", [](auto v) { return v[0] / v[1]; }, [](auto x) { return x[0] / x[1]; }, at(0.7, -1.3)},
      {"sin", [](auto v) { return sin(v[0]) + v[1]; }, [](auto x) { return std::sin(x[0]) + x[1]; }, at(0.4, 0.0)},
      {"cos", [](auto v) { return cos(v[0]) + v[1]; }, [](auto x) { return std::cos(x[0]) + x[1]; }, at(0.4, 0.0)},
      {"tanh", [](auto v) { return tanh(v[0]) + v[1]; }, [](auto x) { return std::tanh(x[0]) + x[1]; }, at(-0.9, 0.0)},
      {"exp", [](auto v) { return exp(v[0]) + v[1]; }, [](auto x) { return std::exp(x[0]) + x[1]; }, at(0.3, 0.0)},
      {"log", [](auto v) { return log(v[0]) + v[1]; }, [](auto x) { return std::log(x[0]) + x[1]; }, at(1.7, 0.0)},
      {"sqrt", [](auto v) { return sqrt(v[0]) + v[1]; }, [](auto x) { return std::sqrt(x[0]) + x[1]; }, at(2.2, 0.0)},
      {"softplus", [](auto v) { return softplus(v[0]) + v[1]; }, [](auto x) { return softplus(x[0]) + x[1]; }, at(0.8, 0.0)},
      {"sigmoid", [](auto v) { return sigmoid(v[0]) + v[1]; }, [](auto x) { return sigmoid(x[0]) + x[1]; }, at(-0.6, 0.0)},
  };
  for (const auto& c : cases) {
    Vec g = ad::gradient([&](Tape&, std::span<const Var> v) { return c.f(v); }, c.points);
    Vec g_fd = finite_diff_grad(c.fd, c.points, 1e-6);
    for (size_t i = 0; i < g.size(); ++i)
      EXPECT_LT(rel_err(g[i], g_fd[i]), 1e-6) << c.name << " component " << i;
  }
}

TEST(Primitives, GradientIsLinear) {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    Vec x = {rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)};
    auto f = [](Tape&, std::span<const Var> v) { return sin(v[0]) * v[1] + exp(v[1] * 0.3); };
    auto g = [](Tape&, std::span<const Var> v) { return tanh(v[0] + v[1]) * v[0]; };
    auto sum = [&](Tape& t, std::span<const Var> v) { return f(t, v) + g(t, v); };
    Vec gf = ad::gradient(f, x), gg = ad::gradient(g, x), gs = ad::gradient(sum, x);
    for (int i = 0; i < 2; ++i) EXPECT_NEAR(gs[i], gf[i] + gg[i], 1e-14);
  }
}

TEST(Dual, ProductRuleIsExact) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    double c = rng.uniform(-2, 2), d = rng.uniform(-2, 2);
    Dual<double> x{a, b}, y{c, d};
    Dual<double> p = x * y;
    EXPECT_EQ(p.v, a * c);
    EXPECT_EQ(p.d, a * d + b * c);
  }
}

// Reverse over forward: the tangent of sin recorded through dual-over-tape
// arithmetic differentiates back to the second derivative.
TEST(Dual, SecondOrderSine) {
  for (double x0 : {0.0, 0.7, -1.9, 2.4}) {
    Vec x = {x0};
    Vec g = ad::gradient(
        [](Tape& t, std::span<const Var> v) {
          Dual<Var> xd{v[0], t.constant(1.0)};
          return sin(xd).d;  // d/dx sin(x), still on tape
        },
        x);
    EXPECT_NEAR(g[0], -std::sin(x0), 1e-8);
  }
}

TEST(Tape, ReplayIsBitExact) {
  Tape tape;
  std::vector<Var> v = tape.inputs(Vec{0.4, -1.1, 2.0});
  Var y = softplus(v[0] * v[1]) + sin(v[2]) / (v[0] + 3.0) - exp(v[1] * 0.25);
  Var z = sqrt(y * y + 1.0) * tanh(v[2] - 0.5);
  (void)z;
  Vec replayed = tape.replay();
  for (size_t i = 0; i < tape.size(); ++i) {
    EXPECT_EQ(replayed[i], tape.val(static_cast<int32_t>(i))) << "node " << i;
  }
}

TEST(Tape, NonFiniteForwardNamesTheNode) {
  Tape tape;
  Var x = tape.input(-1.0);
  try {
    Var y = log(x);
    (void)y;
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("node"), std::string::npos);
  }
}

TEST(Jacobian, IdentityNet) {
  MlpSpec spec{3, {}, 3, Act::Tanh};
  ParamVector p = init_params(spec, 0);
  std::fill(p.flat.begin(), p.flat.end(), 0.0);
  for (int i = 0; i < 3; ++i) p.flat[i * 3 + i] = 1.0;  // W = I, b = 0
  Vec x = {0.2, -0.7, 1.5};
  Matd jac = jacobian_wrt_input(spec, p, x);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(jac(i, j), i == j ? 1.0 : 0.0);
}

TEST(Jacobian, LinearNetRecoversWeights) {
  MlpSpec spec{3, {}, 2, Act::Tanh};
  ParamVector p = init_params(spec, 5);
  for (int i = 0; i < 2; ++i) p.flat[6 + i] = 0.0;  // keep biases zero
  Vec x = {1.0, -2.0, 0.5};
  Matd jac = jacobian_wrt_input(spec, p, x);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(jac(i, j), p.flat[i * 3 + j]);
}

TEST(Jacobian, TwoLayerTanhMatchesFiniteDifferences) {
  MlpSpec spec{4, {16, 16}, 3, Act::Tanh};
  ParamVector p = init_params(spec, 42);
  Rng rng(7);
  Vec x(4);
  for (auto& v : x) v = rng.uniform(-1, 1);
  Matd jac = jacobian_wrt_input(spec, p, x);
  auto f = [&](std::span<const double> xin) { return mlp_forward(spec, p, xin); };
  Vec jac_fd = testutil::finite_diff_jacobian(f, x, 3, 1e-5);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j)
      EXPECT_LT(rel_err(jac(i, j), jac_fd[static_cast<size_t>(i) * 4 + j]), 1e-5)
          << "entry " << i << "," << j;
}

// Loss defined through an input Jacobian: gradients must reach the parameters
// along the dual-over-tape path.
TEST(Jacobian, LossThroughJacobianMatchesFiniteDifferences) {
  MlpSpec spec{2, {8}, 2, Act::Tanh};
  ParamVector p0 = init_params(spec, 11);
  Vec x = {0.3, -0.8};

  auto loss_on_tape = [&](Tape& tape, std::span<const Var> params) {
    std::vector<Var> xv = tape.inputs(x);
    Mat<Var> jac = mlp_jacobian_wrt_input<Var>(spec, params.data(), std::span<const Var>(xv));
    Var s = jac(0, 0) * jac(0, 0);
    for (int i = 0; i < jac.rows; ++i)
      for (int j = 0; j < jac.cols; ++j)
        if (i || j) s += jac(i, j) * jac(i, j);
    return s;
  };
  auto [val, g] = ad::value_and_grad(loss_on_tape, p0.flat);

  auto loss_plain = [&](std::span<const double> params) {
    Matd jac = mlp_jacobian_wrt_input<double>(spec, params.data(), x);
    return norm2(jac.a);
  };
  EXPECT_NEAR(val, loss_plain(p0.flat), 1e-12);
  Vec g_fd = finite_diff_grad(loss_plain, p0.flat, 1e-5);
  int checked = 0;
  Rng rng(23);
  for (int k = 0; k < 30; ++k) {
    int i = rng.uniform_int(static_cast<int>(g.size()));
    if (std::abs(g_fd[i]) < 1e-10) continue;
    EXPECT_LT(rel_err(g[i], g_fd[i]), 1e-4) << "param " << i;
    ++checked;
  }
  EXPECT_GE(checked, 20);
}

}  // namespace
}  // namespace stride
