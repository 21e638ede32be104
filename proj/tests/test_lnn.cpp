#include "stride/lnn.hpp"

#include <gtest/gtest.h>

#include "stride/common.hpp"
#include "test_util.hpp"

namespace stride {
namespace {

using testutil::rel_err;

FeatureConfig pendulum_fc() { return FeatureConfig{1, {1}}; }
FeatureConfig planar_fc() { return FeatureConfig{2, {0, 1}}; }

// Force M == I: zero weights, diagonal chol outputs biased to softplus^{-1}(1 - eps).
LnnParams identity_mass_params(const FeatureConfig& fc, double diag_eps = 1e-4) {
  LnnParams p = make_lnn_params(fc, {8}, 0, diag_eps);
  std::fill(p.chol.flat.begin(), p.chol.flat.end(), 0.0);
  std::fill(p.pot.flat.begin(), p.pot.flat.end(), 0.0);
  double raw = std::log(std::expm1(1.0 - diag_eps));
  int n = fc.n;
  int bias_offset = p.chol_spec.param_count() - p.chol_spec.output_dim;
  int idx = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j, ++idx)
      if (i == j) p.chol.flat[bias_offset + idx] = raw;
  return p;
}

TEST(MassMatrix, ZeroNetScalarValue) {
  FeatureConfig fc = pendulum_fc();
  NormStats ns = NormStats::identity(fc);
  LnnParams p = make_lnn_params(fc, {8}, 3);
  std::fill(p.chol.flat.begin(), p.chol.flat.end(), 0.0);
  Matd m = mass_matrix(p, fc, ns, Vec{0.7});
  double expected = std::pow(softplus(0.0) + 1e-4, 2);
  EXPECT_NEAR(m(0, 0), expected, 1e-15);
  EXPECT_NEAR(m(0, 0), 0.4805, 1e-4);
}

TEST(MassMatrix, SymmetricToMachinePrecision) {
  FeatureConfig fc = planar_fc();
  NormStats ns = NormStats::identity(fc);
  LnnParams p = make_lnn_params(fc, {16, 16}, 5);
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Vec q = {rng.uniform(-2, 2), rng.uniform(-3, 3)};
    Matd m = mass_matrix(p, fc, ns, q);
    EXPECT_EQ(m(0, 1), m(1, 0));
  }
}

TEST(MassMatrix, CholeskyRecoversFactor) {
  FeatureConfig fc = planar_fc();
  NormStats ns = NormStats::identity(fc);
  LnnParams p = make_lnn_params(fc, {16, 16}, 11);
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    Vec q = {rng.uniform(-2, 2), rng.uniform(-3, 3)};
    Matd m = mass_matrix(p, fc, ns, q);
    Vec L = chol_factor(p, fc, ns, q);
    // independent Cholesky of the returned matrix
    double l00 = std::sqrt(m(0, 0));
    double l10 = m(1, 0) / l00;
    double l11 = std::sqrt(m(1, 1) - l10 * l10);
    EXPECT_LT(rel_err(l00, L[0]), 1e-12);
    EXPECT_LT(rel_err(l10, L[2]), 1e-12);
    EXPECT_LT(rel_err(l11, L[3]), 1e-12);
  }
}

TEST(MassMatrix, PositiveDefiniteOverRandomStates) {
  for (int which = 0; which < 2; ++which) {
    FeatureConfig fc = which ? planar_fc() : pendulum_fc();
    NormStats ns = NormStats::identity(fc);
    LnnParams p = make_lnn_params(fc, {64, 64}, 100 + which);
    Rng rng(9 + which);
    for (int trial = 0; trial < 1000; ++trial) {
      Vec q(fc.n);
      for (auto& v : q) v = rng.uniform(-4, 4);
      Vec ev = symmetric_eigenvalues(mass_matrix(p, fc, ns, q));
      EXPECT_GT(ev[0], 0.0);
    }
  }
}

TEST(MassMatrix, ScalarLowerBoundFromDiagEps) {
  FeatureConfig fc = pendulum_fc();
  NormStats ns = NormStats::identity(fc);
  LnnParams p = make_lnn_params(fc, {32}, 7);
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    Matd m = mass_matrix(p, fc, ns, Vec{rng.uniform(-6, 6)});
    EXPECT_GE(m(0, 0), p.diag_eps * p.diag_eps);
  }
}

TEST(Lagrangian, RestingStateGivesMinusPotential) {
  FeatureConfig fc = pendulum_fc();
  NormStats ns = NormStats::identity(fc);
  LnnParams p = make_lnn_params(fc, {16}, 21);
  State s{{0.9}, {0.0}};
  Vec feat(fc.qfeat_dim());
  q_features<double>(fc, ns, s.q.data(), feat.data());
  double v = mlp_forward(p.pot_spec, p.pot, feat)[0];
  EXPECT_DOUBLE_EQ(lagrangian(p, fc, ns, s), -v);
}

TEST(Lagrangian, KineticTermIsQuadraticInVelocity) {
  FeatureConfig fc = planar_fc();
  NormStats ns = NormStats::identity(fc);
  LnnParams p = make_lnn_params(fc, {16, 16}, 23);
  State rest{{0.4, -1.1}, {0.0, 0.0}};
  State slow{{0.4, -1.1}, {0.3, -0.8}};
  State fast{{0.4, -1.1}, {0.6, -1.6}};
  double t_slow = lagrangian(p, fc, ns, slow) - lagrangian(p, fc, ns, rest);
  double t_fast = lagrangian(p, fc, ns, fast) - lagrangian(p, fc, ns, rest);
  EXPECT_LT(rel_err(t_fast, 4.0 * t_slow), 1e-12);
}

TEST(ForwardDynamics, FreeParticleAtRest) {
  FeatureConfig fc = planar_fc();
  NormStats ns = NormStats::identity(fc);
  LnnParams p = identity_mass_params(fc);
  Context ctx{State{{0.2, 0.5}, {0.0, 0.0}}, ControlInput{{0.0, 0.0}}};
  Vec a = forward_dynamics_lnn(p, fc, ns, ctx);
  EXPECT_NEAR(a[0], 0.0, 1e-12);
  EXPECT_NEAR(a[1], 0.0, 1e-12);
}

TEST(ForwardDynamics, NewtonsLawUnderIdentityMass) {
  FeatureConfig fc = planar_fc();
  NormStats ns = NormStats::identity(fc);
  LnnParams p = identity_mass_params(fc);
  Context ctx{State{{0.2, 0.5}, {0.0, 0.0}}, ControlInput{{2.0, -1.0}}};
  Vec a = forward_dynamics_lnn(p, fc, ns, ctx);
  EXPECT_NEAR(a[0], 2.0, 1e-9);
  EXPECT_NEAR(a[1], -1.0, 1e-9);
}

TEST(ForwardDynamics, CoriolisVanishesAtZeroVelocity) {
  FeatureConfig fc = planar_fc();
  NormStats ns = NormStats::identity(fc);
  LnnParams p = make_lnn_params(fc, {32, 32}, 31);
  LnnEval<double> ev;
  LnnWork<double> work;
  Vec q = {1.3, -0.4}, qd = {0.0, 0.0}, tau = {0.7, 0.1};
  lnn_eval<double>(p, fc, ns, p.chol.flat.data(), p.pot.flat.data(), q.data(), qd.data(),
                   tau.data(), ev, work);
  EXPECT_EQ(ev.cvec[0], 0.0);
  EXPECT_EQ(ev.cvec[1], 0.0);
}

TEST(ForwardDynamics, PotentialGaugeDoesNotChangeAcceleration) {
  FeatureConfig fc = pendulum_fc();
  NormStats ns = NormStats::identity(fc);
  LnnParams p = make_lnn_params(fc, {32, 32}, 37);
  Context ctx{State{{0.8}, {1.4}}, ControlInput{{0.5}}};
  Vec a1 = forward_dynamics_lnn(p, fc, ns, ctx);
  LnnParams shifted = p;
  shifted.pot.flat.back() += 123.456;  // output bias
  Vec a2 = forward_dynamics_lnn(shifted, fc, ns, ctx);
  EXPECT_EQ(a1[0], a2[0]);
}

// Independent Euler-Lagrange oracle: assemble the same dynamics from
// finite-difference derivatives of the mass matrix and potential.
Vec euler_lagrange_fd_oracle(const LnnParams& p, const FeatureConfig& fc, const NormStats& ns,
                             const Vec& q, const Vec& qd, const Vec& tau) {
  int n = fc.n;
  double h = 1e-6;
  Matd m = mass_matrix(p, fc, ns, q);
  std::vector<Matd> dm;
  Vec g(n);
  for (int k = 0; k < n; ++k) {
    Vec qp = q, qm = q;
    qp[k] += h;
    qm[k] -= h;
    Matd mp = mass_matrix(p, fc, ns, qp);
    Matd mm = mass_matrix(p, fc, ns, qm);
    Matd d(n, n);
    for (int i = 0; i < n * n; ++i) d.a[i] = (mp.a[i] - mm.a[i]) / (2.0 * h);
    dm.push_back(d);
    auto pot = [&](const Vec& qq) {
      Vec feat(fc.qfeat_dim());
      q_features<double>(fc, ns, qq.data(), feat.data());
      return mlp_forward(p.pot_spec, p.pot, feat)[0];
    };
    g[k] = (pot(qp) - pot(qm)) / (2.0 * h);
  }
  Vec rhs(n);
  for (int i = 0; i < n; ++i) {
    double conv = 0.0;
    for (int k = 0; k < n; ++k)
      for (int j = 0; j < n; ++j) conv += dm[k](i, j) * qd[j] * qd[k];
    double quad = 0.0;
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) quad += qd[a] * dm[i](a, b) * qd[b];
    rhs[i] = tau[i] - (conv - 0.5 * quad) - g[i];
  }
  // direct solve (n <= 2)
  if (n == 1) return {rhs[0] / m(0, 0)};
  double det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
  return {(m(1, 1) * rhs[0] - m(0, 1) * rhs[1]) / det, (m(0, 0) * rhs[1] - m(1, 0) * rhs[0]) / det};
}

TEST(ForwardDynamics, MatchesFiniteDifferenceEulerLagrangeOracle) {
  for (int which = 0; which < 2; ++which) {
    FeatureConfig fc = which ? planar_fc() : pendulum_fc();
    NormStats ns = NormStats::identity(fc);
    LnnParams p = make_lnn_params(fc, {24, 24}, 41 + which);
    Rng rng(55 + which);
    for (int trial = 0; trial < 5; ++trial) {
      Vec q(fc.n), qd(fc.n), tau(fc.n);
      for (int i = 0; i < fc.n; ++i) {
        q[i] = rng.uniform(-2, 2);
        qd[i] = rng.uniform(-2, 2);
        tau[i] = rng.uniform(-1, 1);
      }
      Context ctx{State{q, qd}, ControlInput{tau}};
      Vec a = forward_dynamics_lnn(p, fc, ns, ctx);
      Vec a_ref = euler_lagrange_fd_oracle(p, fc, ns, q, qd, tau);
      for (int i = 0; i < fc.n; ++i) EXPECT_LT(rel_err(a[i], a_ref[i]), 1e-5) << "dof " << i;
    }
  }
}

// Structural energy consistency: the prior's own rollout conserves its own
// learned energy for any parameters, up to integrator error.
TEST(ForwardDynamics, LearnedEnergyConservedAlongOwnRollout) {
  FeatureConfig fc = pendulum_fc();
  NormStats ns = NormStats::identity(fc);
  LnnParams p = make_lnn_params(fc, {32, 32}, 61);
  State s{{0.6}, {0.3}};
  double h = 1e-3;
  double e0 = learned_energy(p, fc, ns, s);
  auto accel = [&](const State& x) {
    Context ctx{x, ControlInput{Vec(1, 0.0)}};
    return forward_dynamics_lnn(p, fc, ns, ctx);
  };
  double max_drift = 0.0;
  for (int step = 0; step < 2000; ++step) {
    // RK4 on (q, qdot)
    auto deriv = [&](const State& x) { return std::pair<Vec, Vec>(x.qdot, accel(x)); };
    auto shift = [&](const std::pair<Vec, Vec>& k, double sc) {
      State y = s;
      y.q[0] += sc * k.first[0];
      y.qdot[0] += sc * k.second[0];
      return y;
    };
    auto k1 = deriv(s);
    auto k2 = deriv(shift(k1, h / 2));
    auto k3 = deriv(shift(k2, h / 2));
    auto k4 = deriv(shift(k3, h));
    s.q[0] += h / 6.0 * (k1.first[0] + 2 * k2.first[0] + 2 * k3.first[0] + k4.first[0]);
    s.qdot[0] += h / 6.0 * (k1.second[0] + 2 * k2.second[0] + 2 * k3.second[0] + k4.second[0]);
    max_drift = std::max(max_drift, std::abs(learned_energy(p, fc, ns, s) - e0));
  }
  EXPECT_LT(max_drift, 1e-8 * std::max(1.0, std::abs(e0)));
}

TEST(ForwardDynamics, SingularFactorThrows) {
  FeatureConfig fc = pendulum_fc();
  NormStats ns = NormStats::identity(fc);
  LnnParams p = make_lnn_params(fc, {8}, 71, /*diag_eps=*/0.0);
  std::fill(p.chol.flat.begin(), p.chol.flat.end(), 0.0);
  p.chol.flat.back() = -60.0;  // softplus(-60) underflows well below 1e-12
  Context ctx{State{{0.1}, {0.0}}, ControlInput{{0.0}}};
  EXPECT_THROW(forward_dynamics_lnn(p, fc, ns, ctx), NumericalError);
}

// Parameter gradients through the full dynamics (factor, Coriolis assembly,
// triangular solves) against finite differences.
TEST(ForwardDynamics, ParameterGradientsMatchFiniteDifferences) {
  FeatureConfig fc = pendulum_fc();
  NormStats ns = NormStats::identity(fc);
  LnnParams p = make_lnn_params(fc, {8, 8}, 81);
  Vec q = {0.7}, qd = {1.2}, tau = {0.4};

  Vec all_params = p.chol.flat;
  all_params.insert(all_params.end(), p.pot.flat.begin(), p.pot.flat.end());
  int n_chol = p.chol.size();

  auto loss_tape = [&](ad::Tape& tape, std::span<const ad::Var> params) {
    std::vector<ad::Var> qv = tape.inputs(q), qdv = tape.inputs(qd), tv = tape.inputs(tau);
    LnnEval<ad::Var> ev;
    LnnWork<ad::Var> work;
    lnn_eval<ad::Var>(p, fc, ns, params.data(), params.data() + n_chol, qv.data(), qdv.data(),
                      tv.data(), ev, work);
    return ev.accel[0] * ev.accel[0];
  };
  auto [val, grad] = ad::value_and_grad(loss_tape, all_params);

  auto loss_plain = [&](std::span<const double> params) {
    LnnEval<double> ev;
    LnnWork<double> work;
    lnn_eval<double>(p, fc, ns, params.data(), params.data() + n_chol, q.data(), qd.data(),
                     tau.data(), ev, work);
    return ev.accel[0] * ev.accel[0];
  };
  EXPECT_NEAR(val, loss_plain(all_params), 1e-12);

  Rng rng(91);
  Vec x = all_params;
  int checked = 0;
  for (int k = 0; k < 40 && checked < 25; ++k) {
    int i = rng.uniform_int(static_cast<int>(x.size()));
    double h = 1e-5;
    double orig = x[i];
    x[i] = orig + h;
    double fp = loss_plain(x);
    x[i] = orig - h;
    double fm = loss_plain(x);
    x[i] = orig;
    double g_fd = (fp - fm) / (2.0 * h);
    if (std::abs(g_fd) < 1e-9) continue;
    EXPECT_LT(rel_err(grad[i], g_fd), 1e-4) << "param " << i;
    ++checked;
  }
  EXPECT_GE(checked, 20);
}

}  // namespace
}  // namespace stride
