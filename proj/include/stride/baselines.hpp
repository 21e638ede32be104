#pragma once

#include <span>
#include <vector>

#include "stride/cfm.hpp"
#include "stride/common.hpp"
#include "stride/features.hpp"
#include "stride/lnn.hpp"
#include "stride/model.hpp"
#include "stride/trainer.hpp"

namespace stride {

// Comparison models, trained under the same capacity and step budget as the
// dual-stream model: a black-box next-observation MLP, a plain Lagrangian
// network, a DDPM over next observations, and a Lagrangian prior with a DDPM
// residual.

// ---------------------------------------------------------------------------
// ONN: obs_t, tau -> obs_{t+1}, trained with MSE on standardized observations.

struct OnnModel {
  int n = 0;
  FeatureConfig fc;
  NormStats stats;
  MlpSpec spec;
  ParamVector net;
  TrainConfig cfg;
  uint64_t seed = 0;
  EnvSpec trained_env;
};

/// Model-space prediction: standardized observation in, standardized next
/// observation out.
inline Vec onn_predict(const OnnModel& m, std::span<const double> obs_std,
                       std::span<const double> tau_std) {
  Vec in(obs_std.begin(), obs_std.end());
  in.insert(in.end(), tau_std.begin(), tau_std.end());
  return mlp_forward(m.spec, m.net, in);
}

/// Raw-units convenience: next observation given the current state and control.
inline Vec onn_predict_next_obs(const OnnModel& m, std::span<const double> obs_raw,
                                std::span<const double> tau) {
  Vec obs_std(obs_dim(m.fc));
  standardize_obs(m.fc, m.stats, obs_raw.data(), obs_std.data());
  Vec tau_std(m.n);
  for (int i = 0; i < m.n; ++i) tau_std[i] = (tau[i] - m.stats.tau_mean[i]) / m.stats.tau_std[i];
  Vec out_std = onn_predict(m, obs_std, tau_std);
  Vec out(obs_dim(m.fc));
  unstandardize_obs(m.fc, m.stats, out_std.data(), out.data());
  return out;
}

struct OnnTrainResult {
  OnnModel model;
  std::vector<TrainCurvePoint> curve;
};

inline OnnTrainResult train_onn(const TrajectoryDataset& ds, const TrainConfig& cfg) {
  ds.validate();
  cfg.validate();
  if (ds.records.size() < 2) throw DataError("train_onn: need at least two records");
  OnnModel m;
  m.n = ds.dof();
  m.fc = feature_config_for(ds.env);
  m.stats = compute_norm_stats(ds, m.fc);
  int od = obs_dim(m.fc);
  m.spec = MlpSpec{od + m.n, cfg.hidden, od, Act::Tanh};
  m.net = init_params(m.spec, Rng(cfg.seed).fork(3).next_u64());
  m.cfg = cfg;
  m.seed = cfg.seed;
  m.trained_env = ds.env;
  m.trained_env.dt = ds.dt;  // record spacing the model was fit at

  // precompute standardized observation pairs
  size_t count = ds.records.size();
  std::vector<Vec> obs_std(count), tau_std(count);
  for (size_t i = 0; i < count; ++i) {
    Vec raw = make_obs(m.fc, State{ds.records[i].q, ds.records[i].qdot});
    obs_std[i].resize(od);
    standardize_obs(m.fc, m.stats, raw.data(), obs_std[i].data());
    tau_std[i].resize(m.n);
    for (int k = 0; k < m.n; ++k)
      tau_std[i][k] = (ds.records[i].tau[k] - m.stats.tau_mean[k]) / m.stats.tau_std[k];
  }

  struct Work {
    MlpWork<ad::Var> mlp;
    std::vector<ad::Var> in, out;
  };
  std::vector<Work> work(kTrainChunks);
  Vec flat = m.net.flat;
  auto record = [&](ad::Tape& tape, const ad::Var* params, int idx, const DatumDraw&,
                    int chunk) -> DatumLoss {
    Work& w = work[chunk];
    int in_dim = m.spec.input_dim;
    w.in.clear();
    for (int j = 0; j < od; ++j) w.in.push_back(tape.constant(obs_std[idx][j]));
    for (int k = 0; k < m.n; ++k) w.in.push_back(tape.constant(tau_std[idx][k]));
    (void)in_dim;
    w.out.assign(od, ad::Var{});
    mlp_forward<ad::Var, ad::Var>(m.spec, params, std::span<const ad::Var>(w.in), w.out.data(),
                                  w.mlp);
    ad::Var e0 = w.out[0] - obs_std[idx + 1][0];
    ad::Var loss = e0 * e0;
    for (int j = 1; j < od; ++j) {
      ad::Var e = w.out[j] - obs_std[idx + 1][j];
      loss = loss + e * e;
    }
    DatumLoss dl{loss, loss.val(), 0.0};
    return dl;
  };

  OnnTrainResult result;
  result.curve = run_training(flat, ds, cfg, 0, record, static_cast<int>(count) - 1);
  m.net.flat = std::move(flat);
  result.model = std::move(m);
  return result;
}

// ---------------------------------------------------------------------------
// DeLaN-style baseline: the Lagrangian prior alone, acceleration MSE only.

struct DelanModel {
  int n = 0;
  FeatureConfig fc;
  NormStats stats;
  LnnParams lnn;
  TrainConfig cfg;
  uint64_t seed = 0;
  EnvSpec trained_env;
};

inline Vec delan_predict(const DelanModel& m, const Context& ctx) {
  return forward_dynamics_lnn(m.lnn, m.fc, m.stats, ctx);
}

struct DelanTrainResult {
  DelanModel model;
  std::vector<TrainCurvePoint> curve;
};

inline DelanTrainResult train_delan(const TrajectoryDataset& ds, const TrainConfig& cfg) {
  ds.validate();
  cfg.validate();
  DelanModel m;
  m.n = ds.dof();
  m.fc = feature_config_for(ds.env);
  m.stats = compute_norm_stats(ds, m.fc);
  m.lnn = make_lnn_params(m.fc, cfg.hidden, Rng(cfg.seed).fork(1).next_u64(), cfg.diag_eps);
  m.cfg = cfg;
  m.seed = cfg.seed;
  m.trained_env = ds.env;
  m.trained_env.dt = ds.dt;  // record spacing the model was fit at

  int n_chol = m.lnn.chol.size();
  Vec flat = m.lnn.chol.flat;
  flat.insert(flat.end(), m.lnn.pot.flat.begin(), m.lnn.pot.flat.end());

  struct Work {
    LnnWork<ad::Var> lnn;
    LnnEval<ad::Var> ev;
    std::vector<ad::Var> q, qd, tau;
  };
  std::vector<Work> work(kTrainChunks);
  auto record = [&](ad::Tape& tape, const ad::Var* params, int idx, const DatumDraw&,
                    int chunk) -> DatumLoss {
    Work& w = work[chunk];
    const Record& rec = ds.records[idx];
    int n = m.n;
    w.q.clear();
    w.qd.clear();
    w.tau.clear();
    for (int i = 0; i < n; ++i) {
      w.q.push_back(tape.constant(rec.q[i]));
      w.qd.push_back(tape.constant(rec.qdot[i]));
      w.tau.push_back(tape.constant(rec.tau[i]));
    }
    lnn_eval<ad::Var>(m.lnn, m.fc, m.stats, params, params + n_chol, w.q.data(), w.qd.data(),
                      w.tau.data(), w.ev, w.lnn);
    // same per-dimension standardization as the dual-stream objective (a pure
    // rescale here, kept for curve comparability)
    ad::Var e0 = (w.ev.accel[0] - rec.qddot[0]) / m.stats.qdd_std[0];
    ad::Var loss = e0 * e0;
    for (int i = 1; i < n; ++i) {
      ad::Var e = (w.ev.accel[i] - rec.qddot[i]) / m.stats.qdd_std[i];
      loss = loss + e * e;
    }
    return DatumLoss{loss, loss.val(), 0.0};
  };

  DelanTrainResult result;
  result.curve = run_training(flat, ds, cfg, 0, record);
  std::copy(flat.begin(), flat.begin() + n_chol, m.lnn.chol.flat.begin());
  std::copy(flat.begin() + n_chol, flat.end(), m.lnn.pot.flat.begin());
  result.model = std::move(m);
  return result;
}

// ---------------------------------------------------------------------------
// DDPM machinery shared by the two diffusion baselines.

struct NoiseSchedule {
  int steps = 50;
  Vec betas, alphas, alpha_bars;

  static NoiseSchedule linear(int T = 50, double beta_lo = 1e-4, double beta_hi = 2e-2) {
    if (T < 1) throw DataError("NoiseSchedule: T must be >= 1");
    NoiseSchedule s;
    s.steps = T;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    double cum = 1.0;
    for (int t = 0; t < T; ++t) {
      s.betas[t] = T == 1 ? beta_hi : beta_lo + (beta_hi - beta_lo) * t / (T - 1);
      s.alphas[t] = 1.0 - s.betas[t];
      cum *= s.alphas[t];
      s.alpha_bars[t] = cum;
    }
    s.validate();
    return s;
  }

  void validate() const {
    for (int t = 0; t < steps; ++t) {
      if (!(betas[t] > 0.0 && betas[t] < 1.0)) throw DataError("NoiseSchedule: betas out of (0,1)");
      if (t > 0 && betas[t] <= betas[t - 1]) throw DataError("NoiseSchedule: betas not increasing");
      if (t > 0 && alpha_bars[t] >= alpha_bars[t - 1])
        throw DataError("NoiseSchedule: alpha_bar not decreasing");
    }
  }

  /// Evenly spaced subsequence of timesteps (1-based, ending at T) for
  /// sampling with fewer function evaluations than the training schedule.
  std::vector<int> subsample(int nfe) const {
    if (nfe < 1 || nfe > steps) throw DataError("NoiseSchedule: bad nfe");
    std::vector<int> ts(nfe);
    for (int j = 0; j < nfe; ++j)
      ts[j] = static_cast<int>(std::llround(static_cast<double>(steps) * (j + 1) / nfe));
    return ts;
  }
};

/// Ancestral sampling over a (possibly subsampled) schedule. `denoise`
/// predicts the injected noise from (x, t_index) with t_index in {1..T}.
/// NFE equals the number of denoiser calls.
template <class DenoiseFn>
Vec ddpm_ancestral_sample(const NoiseSchedule& sched, int nfe, int n, DenoiseFn&& denoise,
                          Rng& rng) {
  std::vector<int> ts = sched.subsample(nfe);
  Vec x(n);
  rng.fill_normal(x);
  for (int j = nfe - 1; j >= 0; --j) {
    int t = ts[j];
    int s = j > 0 ? ts[j - 1] : 0;
    double ab_t = sched.alpha_bars[t - 1];
    double ab_s = s > 0 ? sched.alpha_bars[s - 1] : 1.0;
    double beta_eff = 1.0 - ab_t / ab_s;
    Vec eps_hat = denoise(std::span<const double>(x), t);
    double inv_sqrt_alpha = 1.0 / std::sqrt(ab_t / ab_s);
    double noise_coef = beta_eff / std::sqrt(1.0 - ab_t);
    double sigma = s > 0 ? std::sqrt((1.0 - ab_s) / (1.0 - ab_t) * beta_eff) : 0.0;
    for (int i = 0; i < n; ++i) {
      x[i] = inv_sqrt_alpha * (x[i] - noise_coef * eps_hat[i]);
      if (s > 0) x[i] += sigma * rng.normal();
      if (!std::isfinite(x[i]))
        throw NumericalError("non-finite diffusion state at timestep " + std::to_string(t));
    }
  }
  return x;
}

// ---------------------------------------------------------------------------
// LNN + diffusion residual: prior as in DeLaN, residual forces sampled by a
// DDPM conditioned on the same context, trained on the implied-residual
// target. The iterative sampler is not backpropagated through; the prior sees
// the sampled residual as a fixed offset inside the acceleration term.

struct LnnDiffusionModel {
  int n = 0;
  FeatureConfig fc;
  NormStats stats;
  LnnParams lnn;
  MlpSpec denoiser_spec;  // input: n + time_embed + context_dim
  ParamVector denoiser;
  NoiseSchedule schedule;
  int time_embed_dim = 16;
  TrainConfig cfg;
  uint64_t seed = 0;
  EnvSpec trained_env;
};

/// Denoiser evaluation, generic over the scalar type.
template <class S>
void diffusion_denoise(const LnnDiffusionModel& m, const S* params, const S* x, int t_index,
                       std::span<const S> ctx, S* out, FlowWork<S>& work) {
  work.embed.resize(m.time_embed_dim);
  double t_norm = static_cast<double>(t_index) / m.schedule.steps;
  time_embedding(t_norm, m.time_embed_dim, work.embed.data());
  work.input.clear();
  for (int i = 0; i < m.n; ++i) work.input.push_back(x[i]);
  for (double e : work.embed) work.input.push_back(ad::lift(x[0], e));
  for (const S& c : ctx) work.input.push_back(c);
  mlp_forward<S, S>(m.denoiser_spec, params, std::span<const S>(work.input), out, work.mlp);
}

/// Sampled residual force in standardized units, NFE = denoiser calls.
inline Vec diffusion_residual_sample(const LnnDiffusionModel& m, std::span<const double> ctx,
                                     Rng& rng, int nfe) {
  FlowWork<double> work;
  Vec eps_hat(m.n);
  auto denoise = [&](std::span<const double> x, int t) {
    diffusion_denoise<double>(m, m.denoiser.flat.data(), x.data(), t, ctx, eps_hat.data(), work);
    return eps_hat;
  };
  return ddpm_ancestral_sample(m.schedule, nfe, m.n, denoise, rng);
}

/// Full acceleration prediction (prior + M^{-1} residual sample).
inline Vec lnn_diffusion_predict(const LnnDiffusionModel& m, const Context& ctx, Rng& rng,
                                 int nfe, AccelParts* parts = nullptr) {
  LnnEval<double> ev;
  LnnWork<double> work;
  lnn_eval<double>(m.lnn, m.fc, m.stats, m.lnn.chol.flat.data(), m.lnn.pot.flat.data(),
                   ctx.state.q.data(), ctx.state.qdot.data(), ctx.control.tau.data(), ev, work);
  Vec ctx_feat(m.fc.context_dim());
  context_features<double>(m.fc, m.stats, ctx.state.q.data(), ctx.state.qdot.data(),
                           ctx.control.tau.data(), ctx_feat.data());
  Vec eps_std = diffusion_residual_sample(m, ctx_feat, rng, nfe);
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

struct LnnDiffusionTrainResult {
  LnnDiffusionModel model;
  std::vector<TrainCurvePoint> curve;
};

inline LnnDiffusionTrainResult train_lnn_diffusion(const TrajectoryDataset& ds,
                                                   const TrainConfig& cfg,
                                                   NoiseSchedule schedule = NoiseSchedule::linear()) {
  ds.validate();
  cfg.validate();
  LnnDiffusionModel m;
  m.n = ds.dof();
  m.fc = feature_config_for(ds.env);
  m.stats = compute_norm_stats(ds, m.fc);
  Rng seeder(cfg.seed);
  m.lnn = make_lnn_params(m.fc, cfg.hidden, seeder.fork(1).next_u64(), cfg.diag_eps);
  m.schedule = schedule;
  m.time_embed_dim = cfg.time_embed_dim;
  m.denoiser_spec = MlpSpec{m.n + cfg.time_embed_dim + m.fc.context_dim(), cfg.hidden, m.n,
                            Act::Tanh};
  m.denoiser = init_params(m.denoiser_spec, seeder.fork(4).next_u64());
  m.cfg = cfg;
  m.seed = cfg.seed;
  m.trained_env = ds.env;
  m.trained_env.dt = ds.dt;  // record spacing the model was fit at

  int n_chol = m.lnn.chol.size();
  int n_pot = m.lnn.pot.size();
  Vec flat = m.lnn.chol.flat;
  flat.insert(flat.end(), m.lnn.pot.flat.begin(), m.lnn.pot.flat.end());
  flat.insert(flat.end(), m.denoiser.flat.begin(), m.denoiser.flat.end());

  struct Work {
    LnnWork<ad::Var> lnn;
    LnnEval<ad::Var> ev;
    LnnWork<double> lnn_d;
    LnnEval<double> ev_d;
    FlowWork<double> flow_d;
    FlowWork<ad::Var> flow;
    std::vector<ad::Var> q, qd, tau, ctx, xt, eps_out, delta, f_ext, L_detached;
  };
  std::vector<Work> work(kTrainChunks);
  int n = m.n;

  auto record = [&](ad::Tape& tape, const ad::Var* params, int idx, const DatumDraw& draw,
                    int chunk) -> DatumLoss {
    Work& w = work[chunk];
    const Record& rec = ds.records[idx];

    // stop-gradient residual target from current parameter values
    Vec r_std = implied_residual_force(m.lnn, m.fc, m.stats, flat.data(), flat.data() + n_chol,
                                       rec.q, rec.qdot, rec.tau, rec.qddot, w.lnn_d, w.ev_d);
    for (int i = 0; i < n; ++i) r_std[i] /= m.stats.fext_scale[i];

    Vec ctx_d(m.fc.context_dim());
    context_features<double>(m.fc, m.stats, rec.q.data(), rec.qdot.data(), rec.tau.data(),
                             ctx_d.data());

    // sampled residual for the acceleration term (fixed offset, no gradient
    // through the iterative sampler)
    Rng sample_rng(draw.salt);
    FlowWork<double>& fw = w.flow_d;
    Vec eps_hat_d(n);
    auto denoise_d = [&](std::span<const double> x, int t) {
      diffusion_denoise<double>(m, flat.data() + n_chol + n_pot, x.data(), t, ctx_d,
                                eps_hat_d.data(), fw);
      return eps_hat_d;
    };
    Vec eps_sample = ddpm_ancestral_sample(m.schedule, m.schedule.steps, n, denoise_d, sample_rng);

    // prior stream on tape
    w.q.clear();
    w.qd.clear();
    w.tau.clear();
    for (int i = 0; i < n; ++i) {
      w.q.push_back(tape.constant(rec.q[i]));
      w.qd.push_back(tape.constant(rec.qdot[i]));
      w.tau.push_back(tape.constant(rec.tau[i]));
    }
    lnn_eval<ad::Var>(m.lnn, m.fc, m.stats, params, params + n_chol, w.q.data(), w.qd.data(),
                      w.tau.data(), w.ev, w.lnn);
    w.f_ext.assign(n, ad::Var{});
    for (int i = 0; i < n; ++i) w.f_ext[i] = tape.constant(eps_sample[i] * m.stats.fext_scale[i]);
    // detached factor in the residual solve, same reasoning as the flow model:
    // inflating the inertia must not be a way to mute the residual stream
    w.L_detached.resize(n * n);
    for (int i = 0; i < n * n; ++i) w.L_detached[i] = tape.constant(w.ev.L[i].val());
    w.delta.assign(n, ad::Var{});
    solve_with_factor<ad::Var>(n, w.L_detached.data(), w.f_ext.data(), w.delta.data());

    ad::Var e0 = (rec.qddot[0] - (w.ev.accel[0] + w.delta[0])) / m.stats.qdd_std[0];
    ad::Var accel_term = e0 * e0;
    for (int i = 1; i < n; ++i) {
      ad::Var e = (rec.qddot[i] - (w.ev.accel[i] + w.delta[i])) / m.stats.qdd_std[i];
      accel_term = accel_term + e * e;
    }

    // denoising objective on the residual target
    int t = draw.t_index;
    double ab = m.schedule.alpha_bars[t - 1];
    w.ctx.clear();
    for (double c : ctx_d) w.ctx.push_back(tape.constant(c));
    w.xt.assign(n, ad::Var{});
    for (int i = 0; i < n; ++i)
      w.xt[i] = tape.constant(std::sqrt(ab) * r_std[i] + std::sqrt(1.0 - ab) * draw.noise[i]);
    w.eps_out.assign(n, ad::Var{});
    diffusion_denoise<ad::Var>(m, params + n_chol + n_pot, w.xt.data(), t,
                               std::span<const ad::Var>(w.ctx), w.eps_out.data(), w.flow);
    ad::Var d0 = w.eps_out[0] - draw.noise[0];
    ad::Var denoise_term = d0 * d0;
    for (int i = 1; i < n; ++i) {
      ad::Var d = w.eps_out[i] - draw.noise[i];
      denoise_term = denoise_term + d * d;
    }

    ad::Var total = accel_term + denoise_term * cfg.lambda_fm;
    return DatumLoss{total, accel_term.val(), denoise_term.val()};
  };

  LnnDiffusionTrainResult result;
  result.curve = run_training(flat, ds, cfg, schedule.steps, record);
  std::copy(flat.begin(), flat.begin() + n_chol, m.lnn.chol.flat.begin());
  std::copy(flat.begin() + n_chol, flat.begin() + n_chol + n_pot, m.lnn.pot.flat.begin());
  std::copy(flat.begin() + n_chol + n_pot, flat.end(), m.denoiser.flat.begin());
  result.model = std::move(m);
  return result;
}

// ---------------------------------------------------------------------------
// Pure diffusion over next observations, conditioned on the current
// observation and control.

struct PureDiffusionModel {
  int n = 0;
  FeatureConfig fc;
  NormStats stats;
  MlpSpec denoiser_spec;  // input: obs_dim + time_embed + obs_dim + n
  ParamVector denoiser;
  NoiseSchedule schedule;
  int time_embed_dim = 16;
  bool condition_on_obs = true;  // ablation switch
  TrainConfig cfg;
  uint64_t seed = 0;
  EnvSpec trained_env;
};

template <class S>
void pure_diffusion_denoise(const PureDiffusionModel& m, const S* params, const S* x, int t_index,
                            std::span<const S> cond, S* out, FlowWork<S>& work) {
  work.embed.resize(m.time_embed_dim);
  double t_norm = static_cast<double>(t_index) / m.schedule.steps;
  time_embedding(t_norm, m.time_embed_dim, work.embed.data());
  int od = obs_dim(m.fc);
  work.input.clear();
  for (int i = 0; i < od; ++i) work.input.push_back(x[i]);
  for (double e : work.embed) work.input.push_back(ad::lift(x[0], e));
  for (const S& c : cond) work.input.push_back(c);
  mlp_forward<S, S>(m.denoiser_spec, params, std::span<const S>(work.input), out, work.mlp);
}

/// Sample the next observation (raw units) given the current state/control.
inline Vec pure_diffusion_predict(const PureDiffusionModel& m, std::span<const double> obs_raw,
                                  std::span<const double> tau, Rng& rng, int nfe) {
  int od = obs_dim(m.fc);
  Vec cond(od + m.n, 0.0);
  if (m.condition_on_obs) {
    standardize_obs(m.fc, m.stats, obs_raw.data(), cond.data());
    for (int i = 0; i < m.n; ++i)
      cond[od + i] = (tau[i] - m.stats.tau_mean[i]) / m.stats.tau_std[i];
  }
  FlowWork<double> work;
  Vec eps_hat(od);
  auto denoise = [&](std::span<const double> x, int t) {
    pure_diffusion_denoise<double>(m, m.denoiser.flat.data(), x.data(), t, cond, eps_hat.data(),
                                   work);
    return eps_hat;
  };
  Vec out_std = ddpm_ancestral_sample(m.schedule, nfe, od, denoise, rng);
  Vec out(od);
  unstandardize_obs(m.fc, m.stats, out_std.data(), out.data());
  return out;
}

struct PureDiffusionTrainResult {
  PureDiffusionModel model;
  std::vector<TrainCurvePoint> curve;
};

inline PureDiffusionTrainResult train_pure_diffusion(
    const TrajectoryDataset& ds, const TrainConfig& cfg, bool condition_on_obs = true,
    NoiseSchedule schedule = NoiseSchedule::linear()) {
  ds.validate();
  cfg.validate();
  if (ds.records.size() < 2) throw DataError("train_pure_diffusion: need at least two records");
  PureDiffusionModel m;
  m.n = ds.dof();
  m.fc = feature_config_for(ds.env);
  m.stats = compute_norm_stats(ds, m.fc);
  m.schedule = schedule;
  m.time_embed_dim = cfg.time_embed_dim;
  m.condition_on_obs = condition_on_obs;
  int od = obs_dim(m.fc);
  m.denoiser_spec = MlpSpec{od + cfg.time_embed_dim + od + m.n, cfg.hidden, od, Act::Tanh};
  m.denoiser = init_params(m.denoiser_spec, Rng(cfg.seed).fork(5).next_u64());
  m.cfg = cfg;
  m.seed = cfg.seed;
  m.trained_env = ds.env;
  m.trained_env.dt = ds.dt;  // record spacing the model was fit at

  size_t count = ds.records.size();
  std::vector<Vec> obs_std(count), tau_std(count);
  for (size_t i = 0; i < count; ++i) {
    Vec raw = make_obs(m.fc, State{ds.records[i].q, ds.records[i].qdot});
    obs_std[i].resize(od);
    standardize_obs(m.fc, m.stats, raw.data(), obs_std[i].data());
    tau_std[i].resize(m.n);
    for (int k = 0; k < m.n; ++k)
      tau_std[i][k] = (ds.records[i].tau[k] - m.stats.tau_mean[k]) / m.stats.tau_std[k];
  }

  struct Work {
    FlowWork<ad::Var> flow;
    std::vector<ad::Var> cond, xt, eps_out;
  };
  std::vector<Work> work(kTrainChunks);
  Vec flat = m.denoiser.flat;

  auto record = [&](ad::Tape& tape, const ad::Var* params, int idx, const DatumDraw& draw,
                    int chunk) -> DatumLoss {
    Work& w = work[chunk];
    int t = draw.t_index;
    double ab = m.schedule.alpha_bars[t - 1];
    std::span<const double> noise(draw.noise.data(), od);

    w.cond.clear();
    for (int j = 0; j < od; ++j)
      w.cond.push_back(tape.constant(m.condition_on_obs ? obs_std[idx][j] : 0.0));
    for (int k = 0; k < m.n; ++k)
      w.cond.push_back(tape.constant(m.condition_on_obs ? tau_std[idx][k] : 0.0));
    w.xt.assign(od, ad::Var{});
    for (int j = 0; j < od; ++j)
      w.xt[j] = tape.constant(std::sqrt(ab) * obs_std[idx + 1][j] +
                              std::sqrt(1.0 - ab) * noise[j]);
    w.eps_out.assign(od, ad::Var{});
    pure_diffusion_denoise<ad::Var>(m, params, w.xt.data(), t, std::span<const ad::Var>(w.cond),
                                    w.eps_out.data(), w.flow);
    ad::Var d0 = w.eps_out[0] - noise[0];
    ad::Var loss = d0 * d0;
    for (int j = 1; j < od; ++j) {
      ad::Var d = w.eps_out[j] - noise[j];
      loss = loss + d * d;
    }
    return DatumLoss{loss, 0.0, loss.val()};
  };

  PureDiffusionTrainResult result;
  result.curve = run_training(flat, ds, cfg, schedule.steps, record, static_cast<int>(count) - 1,
                              od);
  m.denoiser.flat = std::move(flat);
  result.model = std::move(m);
  return result;
}

}  // namespace stride
