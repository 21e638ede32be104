#pragma once

#include <span>
#include <vector>

#include "stride/cfm.hpp"
#include "stride/common.hpp"
#include "stride/envs.hpp"
#include "stride/features.hpp"
#include "stride/lnn.hpp"
#include "stride/trainer.hpp"

namespace stride {

// The composed dual-stream predictor
//
//   qdd_pred = f_lnn(q, qd, tau) + M(q)^{-1} eps(q, qd, tau, z),
//
// with the deterministic Lagrangian prior carrying the conservative mechanics
// and the flow residual carrying non-conservative forces. Both streams are
// trained jointly: a squared acceleration error drives the whole prediction,
// and a flow-matching term regresses the field onto the residual target
// r = M qdd_obs - (tau - c - g), which is the generalized force the prior
// fails to explain. The target is held fixed (no gradient) so the prior is
// shaped by the acceleration term alone.

struct StrideModel {
  int n = 0;
  FeatureConfig fc;
  NormStats stats;
  LnnParams lnn;
  FlowFieldParams flow;
  TrainConfig cfg;
  uint64_t seed = 0;
  EnvSpec trained_env;
};

inline StrideModel make_stride_model(const TrajectoryDataset& ds, const TrainConfig& cfg) {
  StrideModel m;
  m.n = ds.dof();
  m.fc = feature_config_for(ds.env);
  m.stats = compute_norm_stats(ds, m.fc);
  Rng seeder(cfg.seed);
  m.lnn = make_lnn_params(m.fc, cfg.hidden, seeder.fork(1).next_u64(), cfg.diag_eps);
  m.flow = make_flow_params(m.fc, cfg.hidden, seeder.fork(2).next_u64(), cfg.time_embed_dim);
  m.cfg = cfg;
  m.seed = cfg.seed;
  m.trained_env = ds.env;
  m.trained_env.dt = ds.dt;  // record spacing the model was fit at
  return m;
}

/// Decomposition of one prediction, for residual-allocation analysis.
struct AccelParts {
  Vec f_lnn;           // prior stream
  Vec residual_accel;  // M^{-1} eps
  Vec f_ext;           // sampled residual force (physical units)
};

/// Deterministic given (model, ctx, z0, nfe).
inline Vec predict_accel(const StrideModel& m, const Context& ctx, std::span<const double> z0,
                         int nfe, AccelParts* parts = nullptr) {
  LnnEval<double> ev;
  LnnWork<double> work;
  lnn_eval<double>(m.lnn, m.fc, m.stats, m.lnn.chol.flat.data(), m.lnn.pot.flat.data(),
                   ctx.state.q.data(), ctx.state.qdot.data(), ctx.control.tau.data(), ev, work);

  Vec ctx_feat(m.fc.context_dim());
  context_features<double>(m.fc, m.stats, ctx.state.q.data(), ctx.state.qdot.data(),
                           ctx.control.tau.data(), ctx_feat.data());
  Vec eps_std(m.n);
  FlowWork<double> fwork;
  std::vector<double> zb, vb;
  sample_residual<double>(m.flow, m.flow.net.flat.data(), ctx_feat, z0, nfe, eps_std.data(), fwork,
                          zb, vb);
  Vec f_ext(m.n);
  for (int i = 0; i < m.n; ++i) f_ext[i] = eps_std[i] * m.stats.fext_scale[i];
  Vec delta(m.n);
  solve_with_factor<double>(m.n, ev.L.data(), f_ext.data(), delta.data());

  Vec accel(m.n);
  for (int i = 0; i < m.n; ++i) accel[i] = ev.accel[i] + delta[i];
  if (parts) {
    parts->f_lnn = ev.accel;
    parts->residual_accel = delta;
    parts->f_ext = f_ext;
  }
  return accel;
}

/// Flow-matching target in standardized units: the prior's implied residual
/// force at one datum, scaled. Plain-double path; gradients are blocked by
/// construction.
inline Vec residual_target_std(const StrideModel& m, const double* chol_p, const double* pot_p,
                               const Record& rec, LnnWork<double>& work, LnnEval<double>& ev) {
  Vec r = implied_residual_force(m.lnn, m.fc, m.stats, chol_p, pot_p, rec.q, rec.qdot, rec.tau,
                                 rec.qddot, work, ev);
  for (int i = 0; i < m.n; ++i) r[i] /= m.stats.fext_scale[i];
  return r;
}

namespace detail {

template <class S>
struct StrideLossWork {
  LnnWork<S> lnn;
  LnnWork<double> lnn_d;
  LnnEval<S> ev;
  LnnEval<double> ev_d;
  FlowWork<S> flow;
  FlowWork<double> flow_d;
  std::vector<S> ctx_feat, z0, eps_std, f_ext, delta, L_detached;
  std::vector<double> zb_d, vb_d;
  std::vector<S> zb, vb;
};

/// One datum of the joint objective, generic over the scalar type. The
/// double-typed parameter pointers back the stop-gradient residual target and
/// the (optional) stop-gradient sampler path.
template <class S>
DatumLoss stride_datum_loss_t(const StrideModel& m, const S* chol_p, const S* pot_p,
                              const S* flow_p, const double* chol_d, const double* pot_d,
                              const double* flow_d, const Record& rec, const DatumDraw& draw,
                              const TrainConfig& cfg, StrideLossWork<S>& w, S* total_out) {
  int n = m.n;

  // stop-gradient residual target from the current parameter values
  Vec r_std = residual_target_std(m, chol_d, pot_d, rec, w.lnn_d, w.ev_d);

  // prior stream on the differentiable path
  std::vector<S> q(n), qd(n), tau(n);
  for (int i = 0; i < n; ++i) {
    q[i] = ad::lift(chol_p[0], rec.q[i]);
    qd[i] = ad::lift(chol_p[0], rec.qdot[i]);
    tau[i] = ad::lift(chol_p[0], rec.tau[i]);
  }
  lnn_eval<S>(m.lnn, m.fc, m.stats, chol_p, pot_p, q.data(), qd.data(), tau.data(), w.ev, w.lnn);

  // standardized context for the flow
  Vec ctx_d(m.fc.context_dim());
  context_features<double>(m.fc, m.stats, rec.q.data(), rec.qdot.data(), rec.tau.data(),
                           ctx_d.data());
  w.ctx_feat.resize(ctx_d.size());
  for (size_t i = 0; i < ctx_d.size(); ++i) w.ctx_feat[i] = ad::lift(chol_p[0], ctx_d[i]);

  // residual sample for the acceleration term (same z0 as the matching pair)
  w.eps_std.assign(n, ad::lift(chol_p[0], 0.0));
  if (cfg.grad_through_sampler) {
    w.z0.resize(n);
    for (int i = 0; i < n; ++i) w.z0[i] = ad::lift(chol_p[0], draw.z0[i]);
    sample_residual<S>(m.flow, flow_p, std::span<const S>(w.ctx_feat),
                       std::span<const S>(w.z0), cfg.nfe_train, w.eps_std.data(), w.flow, w.zb,
                       w.vb);
  } else {
    Vec eps_d(n);
    FlowWork<double>& fw = w.flow_d;
    sample_residual<double>(m.flow, flow_d, ctx_d, draw.z0, cfg.nfe_train, eps_d.data(), fw,
                            w.zb_d, w.vb_d);
    for (int i = 0; i < n; ++i) w.eps_std[i] = ad::lift(chol_p[0], eps_d[i]);
  }

  w.f_ext.assign(n, ad::lift(chol_p[0], 0.0));
  for (int i = 0; i < n; ++i) w.f_ext[i] = w.eps_std[i] * m.stats.fext_scale[i];
  // The factor in the residual solve is detached: its values equal the live
  // factor, but the prior's parameters receive gradient only through f_lnn.
  // Otherwise inflating the inertia is a cheap way to mute the (initially
  // noisy) residual stream, and the implied target M(qdd - f_lnn) grows with
  // it, sending the flow chasing an unbounded scale.
  w.L_detached.resize(n * n);
  for (int i = 0; i < n * n; ++i)
    w.L_detached[i] = ad::lift(chol_p[0], ad::value_of(w.ev.L[i]));
  w.delta.assign(n, ad::lift(chol_p[0], 0.0));
  solve_with_factor<S>(n, w.L_detached.data(), w.f_ext.data(), w.delta.data());

  // acceleration error per dimension in units of its dataset std, so the two
  // objective terms stay order-one and the flow receives balanced gradients
  S accel_term = [&] {
    S e0 = (rec.qddot[0] - (w.ev.accel[0] + w.delta[0])) / m.stats.qdd_std[0];
    S acc = e0 * e0;
    for (int i = 1; i < n; ++i) {
      S e = (rec.qddot[i] - (w.ev.accel[i] + w.delta[i])) / m.stats.qdd_std[i];
      acc = acc + e * e;
    }
    return acc;
  }();

  DatumLoss out{ad::Var{}, 0.0, 0.0};
  out.accel_sq = ad::value_of(accel_term);
  S total = accel_term;
  if (cfg.lambda_fm > 0.0) {
    S fm = flow_matching_loss<S>(m.flow, flow_p, std::span<const S>(w.ctx_feat), r_std, draw.z0,
                                 draw.t, cfg.sigma_min, w.flow);
    out.aux = ad::value_of(fm);
    total = total + fm * cfg.lambda_fm;
  }
  *total_out = total;
  return out;
}

}  // namespace detail

struct LossTerms {
  double total = 0.0;
  double accel_mse = 0.0;
  double fm = 0.0;
};

/// Mean joint loss over a batch, plain-double path (diagnostics and
/// finite-difference checks; training uses the taped equivalent).
inline LossTerms joint_loss(const StrideModel& m, const TrajectoryDataset& ds,
                            std::span<const int> batch, std::span<const DatumDraw> draws,
                            const TrainConfig& cfg) {
  detail::StrideLossWork<double> work;
  LossTerms lt;
  for (size_t b = 0; b < batch.size(); ++b) {
    double total = 0.0;
    DatumLoss dl = detail::stride_datum_loss_t<double>(
        m, m.lnn.chol.flat.data(), m.lnn.pot.flat.data(), m.flow.net.flat.data(),
        m.lnn.chol.flat.data(), m.lnn.pot.flat.data(), m.flow.net.flat.data(),
        ds.records[batch[b]], draws[b], cfg, work, &total);
    if (!std::isfinite(total))
      throw NumericalError("joint_loss: non-finite loss at datum " + std::to_string(batch[b]));
    lt.total += total;
    lt.accel_mse += dl.accel_sq;
    lt.fm += dl.aux;
  }
  double inv = 1.0 / static_cast<double>(batch.size());
  lt.total *= inv;
  lt.accel_mse *= inv;
  lt.fm *= inv;
  return lt;
}

/// Joint loss and its gradient with respect to all parameters, in the fixed
/// order [chol | pot | flow]. Reverse sweep over the same recording the
/// trainer uses.
inline std::pair<LossTerms, Vec> joint_loss_with_grad(const StrideModel& m,
                                                      const TrajectoryDataset& ds,
                                                      std::span<const int> batch,
                                                      std::span<const DatumDraw> draws,
                                                      const TrainConfig& cfg) {
  int n_chol = m.lnn.chol.size();
  int n_pot = m.lnn.pot.size();
  Vec flat = m.lnn.chol.flat;
  flat.insert(flat.end(), m.lnn.pot.flat.begin(), m.lnn.pot.flat.end());
  flat.insert(flat.end(), m.flow.net.flat.begin(), m.flow.net.flat.end());

  detail::StrideLossWork<ad::Var> work;
  ad::Tape tape;
  Vec grad(flat.size(), 0.0);
  LossTerms lt;
  std::vector<double> adj;
  tape.clear();
  std::vector<ad::Var> pv = tape.inputs(flat);
  size_t mark = tape.size();
  for (size_t b = 0; b < batch.size(); ++b) {
    tape.rewind(mark);
    ad::Var total;
    DatumLoss dl = detail::stride_datum_loss_t<ad::Var>(
        m, pv.data(), pv.data() + n_chol, pv.data() + n_chol + n_pot, flat.data(),
        flat.data() + n_chol, flat.data() + n_chol + n_pot, ds.records[batch[b]], draws[b], cfg,
        work, &total);
    tape.backward(total, adj);
    for (size_t i = 0; i < flat.size(); ++i) grad[i] += adj[i];
    lt.total += total.val();
    lt.accel_mse += dl.accel_sq;
    lt.fm += dl.aux;
  }
  double inv = 1.0 / static_cast<double>(batch.size());
  for (double& g : grad) g *= inv;
  lt.total *= inv;
  lt.accel_mse *= inv;
  lt.fm *= inv;
  return {lt, std::move(grad)};
}

/// Deterministic draws for loss evaluation, identical to the trainer's stream.
inline std::vector<DatumDraw> make_draws(int count, int n, uint64_t seed, int schedule_T = 0) {
  Rng rng(seed);
  std::vector<DatumDraw> draws(count);
  for (DatumDraw& d : draws) {
    d.z0.resize(n);
    rng.fill_normal(d.z0);
    d.t = rng.uniform01();
    d.noise.resize(n);
    rng.fill_normal(d.noise);
    d.t_index = schedule_T > 0 ? 1 + rng.uniform_int(schedule_T) : 0;
  }
  return draws;
}

struct StrideTrainResult {
  StrideModel model;
  std::vector<TrainCurvePoint> curve;
};

/// Joint training of both streams with Adam. Deterministic in cfg.seed.
inline StrideTrainResult train_stride(const TrajectoryDataset& ds, const TrainConfig& cfg) {
  ds.validate();
  cfg.validate();
  StrideModel m = make_stride_model(ds, cfg);

  int n_chol = m.lnn.chol.size();
  int n_pot = m.lnn.pot.size();
  Vec flat = m.lnn.chol.flat;
  flat.insert(flat.end(), m.lnn.pot.flat.begin(), m.lnn.pot.flat.end());
  flat.insert(flat.end(), m.flow.net.flat.begin(), m.flow.net.flat.end());

  std::vector<detail::StrideLossWork<ad::Var>> work(kTrainChunks);
  auto record = [&](ad::Tape& tape, const ad::Var* params, int rec_idx, const DatumDraw& draw,
                    int chunk) -> DatumLoss {
    (void)tape;
    ad::Var total;
    DatumLoss dl = detail::stride_datum_loss_t<ad::Var>(
        m, params, params + n_chol, params + n_chol + n_pot, flat.data(), flat.data() + n_chol,
        flat.data() + n_chol + n_pot, ds.records[rec_idx], draw, cfg, work[chunk], &total);
    dl.total = total;
    return dl;
  };

  StrideTrainResult result;
  result.curve = run_training(flat, ds, cfg, 0, record);

  std::copy(flat.begin(), flat.begin() + n_chol, m.lnn.chol.flat.begin());
  std::copy(flat.begin() + n_chol, flat.begin() + n_chol + n_pot, m.lnn.pot.flat.begin());
  std::copy(flat.begin() + n_chol + n_pot, flat.end(), m.flow.net.flat.begin());
  result.model = std::move(m);
  return result;
}

}  // namespace stride
