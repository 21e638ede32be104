#pragma once

#include <span>
#include <vector>

#include "stride/autodiff.hpp"
#include "stride/common.hpp"
#include "stride/features.hpp"
#include "stride/nets.hpp"

namespace stride {

// Lagrangian prior: a Cholesky-factor network L(q) with softplus-positive
// diagonal and a scalar potential network V(q). Forward dynamics expand the
// Euler-Lagrange equations,
//
//   M(q) qdd = tau - c(q, qd) - dV/dq,
//   c = (d(M qd)/dq) qd - 1/2 grad_q(qd' M qd),
//
// with M = L L'. The kinetic energy uses the 1/2 convention, T = 1/2 qd' M qd;
// any constant factor is absorbed into the learned factor so predictions are
// unaffected. The configuration derivatives come from forward-mode passes
// through the networks; with S = ad::Var they stay differentiable in the
// parameters, which is what joint training backpropagates through.

struct LnnParams {
  MlpSpec chol_spec;
  MlpSpec pot_spec;
  ParamVector chol;
  ParamVector pot;
  double diag_eps = 1e-4;  // lower bound offset on the factor diagonal
};

inline LnnParams make_lnn_params(const FeatureConfig& fc, const std::vector<int>& hidden,
                                 uint64_t seed, double diag_eps = 1e-4, Act act = Act::Tanh) {
  fc.validate();
  LnnParams p;
  p.chol_spec = MlpSpec{fc.qfeat_dim(), hidden, fc.n * (fc.n + 1) / 2, act};
  p.pot_spec = MlpSpec{fc.qfeat_dim(), hidden, 1, act};
  p.chol = init_params(p.chol_spec, seed);
  p.pot = init_params(p.pot_spec, seed + 1);
  p.diag_eps = diag_eps;
  return p;
}

namespace detail {

/// Unpack the network's n(n+1)/2 outputs into a dense lower-triangular factor;
/// diagonal entries pass through softplus plus diag_eps.
template <class S>
void build_chol_factor(int n, double diag_eps, const S* raw, S* L) {
  int idx = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j, ++idx) {
      if (i == j)
        L[i * n + j] = softplus(raw[idx]) + diag_eps;
      else
        L[i * n + j] = raw[idx];
    }
  }
}

template <class S>
void build_chol_factor_dual(int n, double diag_eps, const ad::Dual<S>* raw, ad::Dual<S>* L) {
  int idx = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j, ++idx) {
      if (i == j)
        L[i * n + j] = softplus(raw[idx]) + diag_eps;
      else
        L[i * n + j] = raw[idx];
    }
  }
}

}  // namespace detail

/// Reusable scratch for repeated evaluations (one per worker thread).
template <class S>
struct LnnWork {
  std::vector<ad::Dual<S>> feat_dual, chol_raw_dual, L_dual, pot_dual;
  MlpWork<ad::Dual<S>> mlp_dual;
  std::vector<S> feat, chol_raw, pot_out;
  MlpWork<S> mlp;
};

/// Everything the prior produces at one context; dL and g hold the
/// configuration derivatives needed by the Coriolis and gravity terms.
template <class S>
struct LnnEval {
  std::vector<S> L;      // n*n lower-triangular factor, row-major
  std::vector<S> dL;     // k-th block of n*n: dL/dq_k
  std::vector<S> g;      // dV/dq
  std::vector<S> cvec;   // velocity-product term
  std::vector<S> accel;  // M^{-1} (tau - cvec - g)
};

/// Solve (L L') x = b by two triangular substitutions against the known factor.
template <class S>
void solve_with_factor(int n, const S* L, const S* b, S* x) {
  for (int i = 0; i < n; ++i) {
    double diag = ad::value_of(L[i * n + i]);
    if (!(diag > 1e-12))
      throw NumericalError("singular mass factor: diagonal " + std::to_string(i) + " is " +
                           std::to_string(diag));
  }
  // forward: L y = b (y stored in x)
  for (int i = 0; i < n; ++i) {
    S acc = b[i];
    for (int j = 0; j < i; ++j) acc = acc - L[i * n + j] * x[j];
    x[i] = acc / L[i * n + i];
  }
  // backward: L' z = y
  for (int i = n - 1; i >= 0; --i) {
    S acc = x[i];
    for (int j = i + 1; j < n; ++j) acc = acc - L[j * n + i] * x[j];
    x[i] = acc / L[i * n + i];
  }
}

/// Factor, configuration derivatives and forward dynamics in one pass.
/// One forward-mode sweep per coordinate covers both networks.
template <class S>
void lnn_eval(const LnnParams& p, const FeatureConfig& fc, const NormStats& ns, const S* chol_params,
              const S* pot_params, const S* q, const S* qdot, const S* tau, LnnEval<S>& out,
              LnnWork<S>& work) {
  int n = fc.n;
  int qf = fc.qfeat_dim();
  int tri = n * (n + 1) / 2;
  out.L.resize(n * n);
  out.dL.assign(static_cast<size_t>(n) * n * n, ad::lift(q[0], 0.0));
  out.g.resize(n);
  work.feat_dual.resize(qf);
  work.chol_raw_dual.resize(tri);
  work.L_dual.resize(n * n);
  work.pot_dual.resize(1);

  for (int k = 0; k < n; ++k) {
    q_features_dual<S>(fc, ns, q, k, work.feat_dual.data());
    std::span<const ad::Dual<S>> feat(work.feat_dual);
    mlp_forward_dual<S>(p.chol_spec, chol_params, feat, work.chol_raw_dual.data(), work.mlp_dual);
    detail::build_chol_factor_dual<S>(n, p.diag_eps, work.chol_raw_dual.data(), work.L_dual.data());
    if (k == 0) {
      for (int i = 0; i < n * n; ++i) out.L[i] = work.L_dual[i].v;
    }
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) out.dL[static_cast<size_t>(k) * n * n + i * n + j] = work.L_dual[i * n + j].d;

    mlp_forward_dual<S>(p.pot_spec, pot_params, feat, work.pot_dual.data(), work.mlp_dual);
    out.g[k] = work.pot_dual[0].d;
  }

  // A_k = (dM_k) qdot with dM_k = dL_k L' + L dL_k'
  // computed as dL_k (L' qdot) + L (dL_k' qdot)
  std::vector<S> Ltq(n, ad::lift(q[0], 0.0));
  for (int i = 0; i < n; ++i) {
    S acc = out.L[i * n + i] * qdot[i];
    for (int j = i + 1; j < n; ++j) acc = acc + out.L[j * n + i] * qdot[j];
    Ltq[i] = acc;  // (L' qdot)_i
  }
  std::vector<S> A(static_cast<size_t>(n) * n, ad::lift(q[0], 0.0));
  std::vector<S> dLtq(n, ad::lift(q[0], 0.0));
  for (int k = 0; k < n; ++k) {
    const S* dLk = out.dL.data() + static_cast<size_t>(k) * n * n;
    for (int i = 0; i < n; ++i) {
      S acc = dLk[i * n + i] * qdot[i];
      for (int j = i + 1; j < n; ++j) acc = acc + dLk[j * n + i] * qdot[j];
      dLtq[i] = acc;  // (dL_k' qdot)_i
    }
    for (int i = 0; i < n; ++i) {
      // rows of dL_k and L are lower-triangular
      S acc = dLk[i * n + 0] * Ltq[0] + out.L[i * n + 0] * dLtq[0];
      for (int j = 1; j <= i; ++j)
        acc = acc + dLk[i * n + j] * Ltq[j] + out.L[i * n + j] * dLtq[j];
      A[static_cast<size_t>(k) * n + i] = acc;
    }
  }

  out.cvec.assign(n, ad::lift(q[0], 0.0));
  for (int i = 0; i < n; ++i) {
    S acc = A[0 * n + i] * qdot[0];
    for (int k = 1; k < n; ++k) acc = acc + A[static_cast<size_t>(k) * n + i] * qdot[k];
    // 1/2 qd' dM_i qd = 1/2 qd . A_i
    S quad = qdot[0] * A[static_cast<size_t>(i) * n + 0];
    for (int j = 1; j < n; ++j) quad = quad + qdot[j] * A[static_cast<size_t>(i) * n + j];
    out.cvec[i] = acc - quad * 0.5;
  }

  std::vector<S> rhs(n, ad::lift(q[0], 0.0));
  for (int i = 0; i < n; ++i) rhs[i] = tau[i] - out.cvec[i] - out.g[i];
  out.accel.assign(n, ad::lift(q[0], 0.0));
  solve_with_factor<S>(n, out.L.data(), rhs.data(), out.accel.data());
}

/// Lower-triangular factor at q, plain double path.
inline Vec chol_factor(const LnnParams& p, const FeatureConfig& fc, const NormStats& ns,
                       std::span<const double> q) {
  Vec feat(fc.qfeat_dim());
  q_features<double>(fc, ns, q.data(), feat.data());
  Vec raw = mlp_forward(p.chol_spec, p.chol, feat);
  Vec L(static_cast<size_t>(fc.n) * fc.n, 0.0);
  detail::build_chol_factor<double>(fc.n, p.diag_eps, raw.data(), L.data());
  return L;
}

/// M(q) = L(q) L(q)', symmetric positive-definite by construction.
inline Matd mass_matrix(const LnnParams& p, const FeatureConfig& fc, const NormStats& ns,
                        std::span<const double> q) {
  int n = fc.n;
  Vec L = chol_factor(p, fc, ns, q);
  Matd m(n, n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int k = 0; k <= std::min(i, j); ++k) acc += L[i * n + k] * L[j * n + k];
      m(i, j) = acc;
    }
  return m;
}

/// T - V with T = 1/2 qd' M qd.
inline double lagrangian(const LnnParams& p, const FeatureConfig& fc, const NormStats& ns,
                         const State& s) {
  int n = fc.n;
  Vec L = chol_factor(p, fc, ns, s.q);
  double kinetic = 0.0;
  for (int k = 0; k < n; ++k) {
    double col = 0.0;  // (L' qd)_k
    for (int i = k; i < n; ++i) col += L[i * n + k] * s.qdot[i];
    kinetic += col * col;
  }
  kinetic *= 0.5;
  Vec feat(fc.qfeat_dim());
  q_features<double>(fc, ns, s.q.data(), feat.data());
  double potential = mlp_forward(p.pot_spec, p.pot, feat)[0];
  return kinetic - potential;
}

/// Learned total energy T + V; conserved along the prior's own rollouts.
inline double learned_energy(const LnnParams& p, const FeatureConfig& fc, const NormStats& ns,
                             const State& s) {
  double lag = lagrangian(p, fc, ns, s);
  Vec feat(fc.qfeat_dim());
  q_features<double>(fc, ns, s.q.data(), feat.data());
  double potential = mlp_forward(p.pot_spec, p.pot, feat)[0];
  return lag + 2.0 * potential;  // (T - V) + 2V
}

/// Deterministic forward dynamics of the prior.
inline Vec forward_dynamics_lnn(const LnnParams& p, const FeatureConfig& fc, const NormStats& ns,
                                const Context& ctx) {
  LnnEval<double> ev;
  LnnWork<double> work;
  lnn_eval<double>(p, fc, ns, p.chol.flat.data(), p.pot.flat.data(), ctx.state.q.data(),
                   ctx.state.qdot.data(), ctx.control.tau.data(), ev, work);
  return ev.accel;
}

/// Generalized force the prior leaves unexplained at an observed datum:
/// M qdd_obs - (tau - c - g). This is both the flow-matching target (in
/// standardized units) and the implied residual force of a plain Lagrangian
/// model. Plain-double path; parameter pointers allow evaluation at values
/// other than the ones stored in `p`.
inline Vec implied_residual_force(const LnnParams& p, const FeatureConfig& fc, const NormStats& ns,
                                  const double* chol_params, const double* pot_params,
                                  std::span<const double> q, std::span<const double> qdot,
                                  std::span<const double> tau, std::span<const double> qddot,
                                  LnnWork<double>& work, LnnEval<double>& ev) {
  lnn_eval<double>(p, fc, ns, chol_params, pot_params, q.data(), qdot.data(), tau.data(), ev,
                   work);
  int n = fc.n;
  Vec lt(n, 0.0), r(n, 0.0);
  for (int k = 0; k < n; ++k) {
    double acc = 0.0;
    for (int i = k; i < n; ++i) acc += ev.L[i * n + k] * qddot[i];
    lt[k] = acc;
  }
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int k = 0; k <= i; ++k) acc += ev.L[i * n + k] * lt[k];
    r[i] = acc - (tau[i] - ev.cvec[i] - ev.g[i]);
  }
  return r;
}

inline Vec implied_residual_force(const LnnParams& p, const FeatureConfig& fc, const NormStats& ns,
                                  std::span<const double> q, std::span<const double> qdot,
                                  std::span<const double> tau, std::span<const double> qddot) {
  LnnWork<double> work;
  LnnEval<double> ev;
  return implied_residual_force(p, fc, ns, p.chol.flat.data(), p.pot.flat.data(), q, qdot, tau,
                                qddot, work, ev);
}

}  // namespace stride
