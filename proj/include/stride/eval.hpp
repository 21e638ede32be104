#pragma once

#include <chrono>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stride/checkpoint.hpp"

namespace stride {

// Evaluation protocols: open-loop rollout error, residual-force error,
// NFE/accuracy sweeps, phase portraits and residual allocation. Reports embed
// the checkpoint digest and seeds; re-running with the same inputs reproduces
// every error figure bit-exactly (wall-clock throughput columns excepted).

struct UnsupportedModelError : DataError {
  using DataError::DataError;
};

enum class ZPolicy { Sampled, Zero };

inline constexpr int kEvalRollouts = 16;  // stochastic rollouts per anchor
inline constexpr int kEvalDraws = 16;     // residual draws per query point

// ---------------------------------------------------------------------------
// Uniform model views.

struct AccelView {
  int n = 0;
  bool stochastic = false;
  bool has_force_stream = false;
  // qddot at a context; fills decomposition parts when requested
  std::function<Vec(const Context&, ZPolicy, int nfe, Rng&, AccelParts*)> accel;
  // mean sampled external force over n_draws (models with a force stream)
  std::function<Vec(const Context&, int n_draws, int nfe, Rng&)> mean_force;
};

struct ObsView {
  int n = 0;
  bool stochastic = false;
  std::function<Vec(std::span<const double> obs_raw, std::span<const double> tau, ZPolicy, int nfe,
                    Rng&)>
      next_obs;
};

struct ModelView {
  std::string kind;
  int n = 0;
  FeatureConfig fc;
  double dt = 0.0;  // record spacing the model was trained at (0 for oracle)
  std::optional<AccelView> accel;
  std::optional<ObsView> obs;
};

inline ModelView make_view(const AnyModel& any) {
  ModelView view;
  view.kind = model_kind_name(any);

  if (const auto* ptr = std::get_if<StrideModel>(&any)) {
    view.n = ptr->n;
    view.fc = ptr->fc;
    view.dt = ptr->trained_env.dt;
    AccelView av;
    av.n = ptr->n;
    av.stochastic = true;
    av.has_force_stream = true;
    av.accel = [m = *ptr](const Context& ctx, ZPolicy zp, int nfe, Rng& rng, AccelParts* parts) {
      Vec z0(m.n, 0.0);
      if (zp == ZPolicy::Sampled) rng.fill_normal(z0);
      return predict_accel(m, ctx, z0, nfe, parts);
    };
    av.mean_force = [m = *ptr](const Context& ctx, int n_draws, int nfe, Rng& rng) {
      Vec acc(m.n, 0.0);
      AccelParts parts;
      Vec z0(m.n);
      for (int k = 0; k < n_draws; ++k) {
        rng.fill_normal(z0);
        predict_accel(m, ctx, z0, nfe, &parts);
        for (int i = 0; i < m.n; ++i) acc[i] += parts.f_ext[i] / n_draws;
      }
      return acc;
    };
    view.accel = std::move(av);
    return view;
  }

  if (const auto* ptr = std::get_if<DelanModel>(&any)) {
    view.n = ptr->n;
    view.fc = ptr->fc;
    view.dt = ptr->trained_env.dt;
    AccelView av;
    av.n = ptr->n;
    av.accel = [m = *ptr](const Context& ctx, ZPolicy, int, Rng&, AccelParts* parts) {
      Vec a = delan_predict(m, ctx);
      if (parts) {
        parts->f_lnn = a;
        parts->residual_accel.assign(m.n, 0.0);
        parts->f_ext.assign(m.n, 0.0);
      }
      return a;
    };
    view.accel = std::move(av);
    return view;
  }

  if (const auto* ptr = std::get_if<LnnDiffusionModel>(&any)) {
    view.n = ptr->n;
    view.fc = ptr->fc;
    view.dt = ptr->trained_env.dt;
    AccelView av;
    av.n = ptr->n;
    av.stochastic = true;
    av.has_force_stream = true;
    av.accel = [m = *ptr](const Context& ctx, ZPolicy zp, int nfe, Rng& rng, AccelParts* parts) {
      if (zp == ZPolicy::Zero) {
        // deterministic comparison: suppress the residual stream
        Vec a = forward_dynamics_lnn(m.lnn, m.fc, m.stats, ctx);
        if (parts) {
          parts->f_lnn = a;
          parts->residual_accel.assign(m.n, 0.0);
          parts->f_ext.assign(m.n, 0.0);
        }
        return a;
      }
      return lnn_diffusion_predict(m, ctx, rng, std::min(nfe, m.schedule.steps), parts);
    };
    av.mean_force = [m = *ptr](const Context& ctx, int n_draws, int nfe, Rng& rng) {
      Vec ctx_feat(m.fc.context_dim());
      context_features<double>(m.fc, m.stats, ctx.state.q.data(), ctx.state.qdot.data(),
                               ctx.control.tau.data(), ctx_feat.data());
      Vec acc(m.n, 0.0);
      for (int k = 0; k < n_draws; ++k) {
        Vec eps = diffusion_residual_sample(m, ctx_feat, rng, std::min(nfe, m.schedule.steps));
        for (int i = 0; i < m.n; ++i) acc[i] += eps[i] * m.stats.fext_scale[i] / n_draws;
      }
      return acc;
    };
    view.accel = std::move(av);
    return view;
  }

  if (const auto* ptr = std::get_if<OracleModel>(&any)) {
    int n = ptr->env.dof();
    view.n = n;
    view.fc = feature_config_for(ptr->env);
    view.dt = ptr->env.dt;
    AccelView av;
    av.n = n;
    av.has_force_stream = true;
    av.accel = [env = ptr->env, n](const Context& ctx, ZPolicy, int, Rng&, AccelParts* parts) {
      DynResult d = true_dynamics(env, ctx.state, ctx.control.tau);
      if (parts) {
        parts->f_ext = d.f_ext;
        parts->residual_accel.assign(n, 0.0);
        parts->f_lnn = d.qddot;
      }
      return d.qddot;
    };
    av.mean_force = [env = ptr->env](const Context& ctx, int, int, Rng&) {
      return true_dynamics(env, ctx.state, ctx.control.tau).f_ext;
    };
    view.accel = std::move(av);
    return view;
  }

  if (const auto* ptr = std::get_if<OnnModel>(&any)) {
    view.n = ptr->n;
    view.fc = ptr->fc;
    view.dt = ptr->trained_env.dt;
    ObsView ov;
    ov.n = ptr->n;
    ov.next_obs = [m = *ptr](std::span<const double> obs, std::span<const double> tau, ZPolicy,
                             int, Rng&) { return onn_predict_next_obs(m, obs, tau); };
    view.obs = std::move(ov);
    return view;
  }

  if (const auto* ptr = std::get_if<PureDiffusionModel>(&any)) {
    view.n = ptr->n;
    view.fc = ptr->fc;
    view.dt = ptr->trained_env.dt;
    ObsView ov;
    ov.n = ptr->n;
    ov.stochastic = true;
    ov.next_obs = [m = *ptr](std::span<const double> obs, std::span<const double> tau, ZPolicy zp,
                             int nfe, Rng& rng) {
      int steps = std::min(std::max(nfe, 1), m.schedule.steps);
      if (zp == ZPolicy::Zero) {
        // average a few samples for a deterministic-ish comparison point
        Rng fixed(12345);
        Vec acc(obs_dim(m.fc), 0.0);
        for (int k = 0; k < 8; ++k) {
          Vec s = pure_diffusion_predict(m, obs, tau, fixed, steps);
          for (size_t j = 0; j < acc.size(); ++j) acc[j] += s[j] / 8.0;
        }
        return acc;
      }
      return pure_diffusion_predict(m, obs, tau, rng, steps);
    };
    view.obs = std::move(ov);
    return view;
  }

  throw DataError("make_view: unhandled model kind");
}

// ---------------------------------------------------------------------------
// Open-loop rollout error.

struct RolloutReport {
  int horizon = 0;
  int n_starts = 0;
  Vec per_step_rmse;        // normalized, length horizon
  Vec cumulative_rmse;      // sqrt of running sum of per-step MSE; nondecreasing
  Vec per_step_force_rmse;  // empty unless the model exposes a force stream
  Vec residual_fraction;    // mean |M^-1 eps| / |qdd| per step (stochastic models)
  uint64_t seed = 0;
  std::string config_digest;
  std::string z_policy;

  double cumulative(int h) const { return cumulative_rmse.at(h - 1); }
};

/// One step of the named integrator driven by a model acceleration callback.
template <class AccelFn>
State integrate_accel_step(IntegratorKind kind, double dt, const State& s,
                           std::span<const double> tau, AccelFn&& accel) {
  int n = s.dof();
  if (kind == IntegratorKind::SemiImplicitEuler) {
    State out = s;
    Vec a = accel(s);
    for (int i = 0; i < n; ++i) {
      out.qdot[i] = s.qdot[i] + dt * a[i];
      out.q[i] = s.q[i] + dt * out.qdot[i];
    }
    return out;
  }
  auto deriv = [&](const State& x) { return std::pair<Vec, Vec>(x.qdot, accel(x)); };
  auto advance = [&](const std::pair<Vec, Vec>& k, double sc) {
    State y = s;
    for (int i = 0; i < n; ++i) {
      y.q[i] = s.q[i] + sc * k.first[i];
      y.qdot[i] = s.qdot[i] + sc * k.second[i];
    }
    return y;
  };
  auto k1 = deriv(s);
  auto k2 = deriv(advance(k1, dt / 2));
  auto k3 = deriv(advance(k2, dt / 2));
  auto k4 = deriv(advance(k3, dt));
  State out = s;
  for (int i = 0; i < n; ++i) {
    out.q[i] = s.q[i] + dt / 6.0 * (k1.first[i] + 2 * k2.first[i] + 2 * k3.first[i] + k4.first[i]);
    out.qdot[i] =
        s.qdot[i] + dt / 6.0 * (k1.second[i] + 2 * k2.second[i] + 2 * k3.second[i] + k4.second[i]);
  }
  return out;
}

namespace detail {

inline Vec dataset_obs_std(const TrajectoryDataset& ds, const FeatureConfig& fc) {
  int od = obs_dim(fc);
  std::vector<Vec> rows;
  rows.reserve(ds.records.size());
  for (const Record& r : ds.records) rows.push_back(make_obs(fc, State{r.q, r.qdot}));
  Vec mu, sd;
  mean_std(rows, od, mu, sd);
  return sd;
}

inline double clamp_obs(double v) {
  if (!std::isfinite(v)) return 1e9;
  return std::max(-1e9, std::min(1e9, v));
}

}  // namespace detail

/// Open-loop rollouts from randomly anchored dataset states using recorded
/// controls. Errors are computed in observation space, per dimension
/// normalized by the dataset std. Stochastic models are scored by the median
/// over kEvalRollouts independent rollouts per anchor.
inline RolloutReport eval_rollout(const AnyModel& any, const TrajectoryDataset& ds, int H,
                                  int n_starts, ZPolicy zp, int nfe, uint64_t seed) {
  ds.validate();
  if (n_starts < 1) throw DataError("eval_rollout: n_starts must be >= 1");
  ModelView view = make_view(any);
  const FeatureConfig& fc = view.fc;
  if (fc.n != ds.dof()) throw DataError("eval_rollout: model/dataset dimension mismatch");
  int od = obs_dim(fc);
  if (static_cast<int>(ds.records.size()) <= H + 1)
    throw DataError("eval_rollout: dataset shorter than horizon");

  Vec obs_std = detail::dataset_obs_std(ds, fc);
  bool stochastic = (view.accel && view.accel->stochastic) || (view.obs && view.obs->stochastic);
  int n_rollouts = (stochastic && zp == ZPolicy::Sampled) ? kEvalRollouts : 1;
  bool force_stream = view.accel && view.accel->has_force_stream;

  RolloutReport report;
  report.horizon = H;
  report.n_starts = n_starts;
  report.seed = seed;
  report.z_policy = zp == ZPolicy::Sampled ? "sampled" : "zero";
  report.config_digest = checkpoint_digest(any);

  Mat<double> step_mse(H, 1, 0.0);
  Vec force_se(H, 0.0);
  Vec frac_sum(H, 0.0);

  Rng rng(seed);
  std::vector<Vec> rollout_sq(n_rollouts, Vec(H, 0.0));
  for (int a = 0; a < n_starts; ++a) {
    int anchor = rng.uniform_int(static_cast<int>(ds.records.size()) - H - 1);
    for (int k = 0; k < n_rollouts; ++k) {
      Rng stream = rng.fork(static_cast<uint64_t>(a) * 1000 + k);
      State s{ds.records[anchor].q, ds.records[anchor].qdot};
      Vec obs = make_obs(fc, s);
      for (int h = 0; h < H; ++h) {
        const Record& now = ds.records[anchor + h];
        const Record& next = ds.records[anchor + h + 1];
        AccelParts parts;
        if (view.accel) {
          // one residual draw per step: every integrator substage re-creates
          // the same stream so z stays fixed within the step
          Rng step_rng = stream.fork(h);
          auto accel_fn = [&](const State& x) {
            Context ctx{x, ControlInput{now.tau}};
            Rng r = step_rng;
            return view.accel->accel(ctx, zp, nfe, r, nullptr);
          };
          Context ctx{s, ControlInput{now.tau}};
          Rng r0 = step_rng;
          Vec a_here = view.accel->accel(ctx, zp, nfe, r0, &parts);
          s = integrate_accel_step(ds.env.integrator, ds.dt, s, now.tau, accel_fn);
          for (double& v : s.q) v = detail::clamp_obs(v);
          for (double& v : s.qdot) v = detail::clamp_obs(v);
          obs = make_obs(fc, s);
          if (force_stream) {
            double se = 0.0;
            for (int i = 0; i < fc.n; ++i) se += std::pow(parts.f_ext[i] - now.f_ext[i], 2);
            force_se[h] += se / (fc.n * n_rollouts * n_starts);
          }
          double anorm = norm(a_here);
          frac_sum[h] += anorm > 1e-12 ? norm(parts.residual_accel) / anorm : 0.0;
        } else {
          obs = view.obs->next_obs(obs, now.tau, zp, nfe, stream);
          for (double& v : obs) v = detail::clamp_obs(v);
        }
        Vec obs_true = make_obs(fc, State{next.q, next.qdot});
        double sq = 0.0;
        for (int j = 0; j < od; ++j) {
          double d = (obs[j] - obs_true[j]) / obs_std[j];
          sq += d * d;
        }
        rollout_sq[k][h] = sq / od;
      }
    }
    for (int h = 0; h < H; ++h) {
      Vec vals(n_rollouts);
      for (int k = 0; k < n_rollouts; ++k) vals[k] = rollout_sq[k][h];
      step_mse(h, 0) += median(vals) / n_starts;
    }
  }

  report.per_step_rmse.resize(H);
  report.cumulative_rmse.resize(H);
  double running = 0.0;
  for (int h = 0; h < H; ++h) {
    report.per_step_rmse[h] = std::sqrt(step_mse(h, 0));
    running += step_mse(h, 0);
    report.cumulative_rmse[h] = std::sqrt(running);
  }
  if (force_stream) {
    report.per_step_force_rmse.resize(H);
    for (int h = 0; h < H; ++h) report.per_step_force_rmse[h] = std::sqrt(force_se[h]);
  }
  if (view.accel) {
    report.residual_fraction.resize(H);
    for (int h = 0; h < H; ++h)
      report.residual_fraction[h] = frac_sum[h] / (n_rollouts * n_starts);
  }
  return report;
}

inline void write_rollout_csv(const RolloutReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "# config_digest=" << r.config_digest << " seed=" << r.seed << " z=" << r.z_policy
      << " starts=" << r.n_starts << "\n";
  out << "step,rmse,cumulative_rmse,force_rmse,residual_fraction\n";
  for (int h = 0; h < r.horizon; ++h) {
    out << (h + 1) << ',' << format_double(r.per_step_rmse[h]) << ','
        << format_double(r.cumulative_rmse[h]) << ',';
    if (!r.per_step_force_rmse.empty()) out << format_double(r.per_step_force_rmse[h]);
    out << ',';
    if (!r.residual_fraction.empty()) out << format_double(r.residual_fraction[h]);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Residual-force error against ground truth.

struct ForceReport {
  double rmse = 0.0;          // all records
  double rmse_contact = 0.0;  // records with active external force
  double peak_force = 0.0;    // max |f_ext_true| in the dataset
  double fraction_of_peak = 0.0;
  int n_records = 0;
  int n_contact = 0;
  uint64_t seed = 0;
  std::string config_digest;
};

/// Force prediction per model kind: sampled-mean forces for generative
/// residuals, the implied residual for the plain Lagrangian model (which
/// explains observations through M qdd_obs - (tau - c - g)), ground truth for
/// the oracle. Observation-space models have no force stream.
inline ForceReport eval_force(const AnyModel& any, const TrajectoryDataset& ds, int nfe,
                              uint64_t seed) {
  ds.validate();
  ForceReport report;
  report.seed = seed;
  report.config_digest = checkpoint_digest(any);
  int n = ds.dof();

  std::function<Vec(const Record&, Rng&)> predict;
  if (const auto* m = std::get_if<DelanModel>(&any)) {
    predict = [m](const Record& rec, Rng&) {
      return implied_residual_force(m->lnn, m->fc, m->stats, rec.q, rec.qdot, rec.tau, rec.qddot);
    };
  } else if (std::holds_alternative<StrideModel>(any) ||
             std::holds_alternative<LnnDiffusionModel>(any) ||
             std::holds_alternative<OracleModel>(any)) {
    ModelView view = make_view(any);
    AccelView av = *view.accel;
    predict = [av, nfe](const Record& rec, Rng& rng) {
      Context ctx{State{rec.q, rec.qdot}, ControlInput{rec.tau}};
      return av.mean_force(ctx, kEvalDraws, nfe, rng);
    };
  } else {
    throw UnsupportedModelError("model kind '" + model_kind_name(any) +
                                "' has no external-force stream");
  }

  Rng rng(seed);
  double se_all = 0.0, se_contact = 0.0;
  int n_all = 0, n_contact = 0;
  for (const Record& rec : ds.records) {
    report.peak_force = std::max(report.peak_force, norm(rec.f_ext));
    Vec f = predict(rec, rng);
    double se = 0.0;
    for (int i = 0; i < n; ++i) se += std::pow(f[i] - rec.f_ext[i], 2);
    se /= n;
    se_all += se;
    ++n_all;
    if (record_in_contact(rec)) {
      se_contact += se;
      ++n_contact;
    }
  }
  report.rmse = std::sqrt(se_all / n_all);
  report.rmse_contact = n_contact ? std::sqrt(se_contact / n_contact) : 0.0;
  report.fraction_of_peak = report.peak_force > 0 ? report.rmse_contact / report.peak_force : 0.0;
  report.n_records = n_all;
  report.n_contact = n_contact;
  return report;
}

inline void write_force_csv(const ForceReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "# config_digest=" << r.config_digest << " seed=" << r.seed << "\n";
  out << "rmse,rmse_contact,peak_force,fraction_of_peak,n_records,n_contact\n";
  out << format_double(r.rmse) << ',' << format_double(r.rmse_contact) << ','
      << format_double(r.peak_force) << ',' << format_double(r.fraction_of_peak) << ','
      << r.n_records << ',' << r.n_contact << '\n';
}

// ---------------------------------------------------------------------------
// Residual allocation between smooth and contact regimes.

struct AllocationReport {
  double flight_fraction = 0.0;   // mean |M^-1 eps|/|qdd_pred| off contact
  double contact_fraction = 0.0;  // same, on contact
  int n_flight = 0;
  int n_contact = 0;
  uint64_t seed = 0;
  std::string config_digest;
};

inline AllocationReport eval_residual_allocation(const AnyModel& any, const TrajectoryDataset& ds,
                                                 int nfe, uint64_t seed) {
  ds.validate();
  ModelView view = make_view(any);
  if (!view.accel || !view.accel->stochastic)
    throw UnsupportedModelError("residual allocation needs a stochastic acceleration model");
  AllocationReport report;
  report.seed = seed;
  report.config_digest = checkpoint_digest(any);

  Rng rng(seed);
  double flight_sum = 0.0, contact_sum = 0.0;
  for (const Record& rec : ds.records) {
    Context ctx{State{rec.q, rec.qdot}, ControlInput{rec.tau}};
    double frac = 0.0;
    AccelParts parts;
    for (int k = 0; k < kEvalDraws; ++k) {
      Vec a = view.accel->accel(ctx, ZPolicy::Sampled, nfe, rng, &parts);
      double anorm = norm(a);
      frac += anorm > 1e-12 ? norm(parts.residual_accel) / anorm : 0.0;
    }
    frac /= kEvalDraws;
    if (record_in_contact(rec)) {
      contact_sum += frac;
      ++report.n_contact;
    } else {
      flight_sum += frac;
      ++report.n_flight;
    }
  }
  report.flight_fraction = report.n_flight ? flight_sum / report.n_flight : 0.0;
  report.contact_fraction = report.n_contact ? contact_sum / report.n_contact : 0.0;
  return report;
}

// ---------------------------------------------------------------------------
// NFE sweep: accuracy and throughput of the two generative residuals.

struct NfeRow {
  int nfe = 0;
  double flow_rollout_rmse = 0.0;
  double diff_rollout_rmse = 0.0;
  double flow_samples_per_sec = 0.0;  // wall clock, not bit-reproducible
  double diff_samples_per_sec = 0.0;
};

inline std::vector<NfeRow> eval_nfe_sweep(const AnyModel& flow_model, const AnyModel& diff_model,
                                          const TrajectoryDataset& ds,
                                          const std::vector<int>& nfe_list, int H, int n_starts,
                                          uint64_t seed) {
  if (!std::holds_alternative<StrideModel>(flow_model))
    throw UnsupportedModelError("nfe sweep: first model must be the flow-residual model");
  if (!std::holds_alternative<LnnDiffusionModel>(diff_model))
    throw UnsupportedModelError("nfe sweep: second model must be the diffusion-residual model");
  const StrideModel& fm = std::get<StrideModel>(flow_model);
  const LnnDiffusionModel& dm = std::get<LnnDiffusionModel>(diff_model);

  const Record& rec = ds.records[ds.records.size() / 2];
  Vec ctx_feat_f(fm.fc.context_dim()), ctx_feat_d(dm.fc.context_dim());
  context_features<double>(fm.fc, fm.stats, rec.q.data(), rec.qdot.data(), rec.tau.data(),
                           ctx_feat_f.data());
  context_features<double>(dm.fc, dm.stats, rec.q.data(), rec.qdot.data(), rec.tau.data(),
                           ctx_feat_d.data());

  std::vector<NfeRow> rows;
  for (int nfe : nfe_list) {
    NfeRow row;
    row.nfe = nfe;
    row.flow_rollout_rmse =
        eval_rollout(flow_model, ds, H, n_starts, ZPolicy::Sampled, nfe, seed).cumulative(H);
    row.diff_rollout_rmse =
        eval_rollout(diff_model, ds, H, n_starts, ZPolicy::Sampled, std::min(nfe, dm.schedule.steps),
                     seed)
            .cumulative(H);

    int reps = 2000 / nfe + 8;
    {
      Rng rng(seed);
      Vec z0(fm.n);
      auto t0 = std::chrono::steady_clock::now();
      for (int k = 0; k < reps; ++k) {
        rng.fill_normal(z0);
        sample_residual(fm.flow, ctx_feat_f, z0, nfe);
      }
      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      row.flow_samples_per_sec = reps / std::max(secs, 1e-9);
    }
    {
      Rng rng(seed);
      auto t0 = std::chrono::steady_clock::now();
      for (int k = 0; k < reps; ++k)
        diffusion_residual_sample(dm, ctx_feat_d, rng, std::min(nfe, dm.schedule.steps));
      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      row.diff_samples_per_sec = reps / std::max(secs, 1e-9);
    }
    rows.push_back(row);
  }
  return rows;
}

inline void write_nfe_csv(const std::vector<NfeRow>& rows, const std::string& flow_digest,
                          const std::string& diff_digest, uint64_t seed, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "# flow_digest=" << flow_digest << " diff_digest=" << diff_digest << " seed=" << seed
      << "\n";
  out << "nfe,flow_rollout_rmse,diff_rollout_rmse,flow_samples_per_sec,diff_samples_per_sec\n";
  for (const NfeRow& r : rows)
    out << r.nfe << ',' << format_double(r.flow_rollout_rmse) << ','
        << format_double(r.diff_rollout_rmse) << ',' << format_double(r.flow_samples_per_sec)
        << ',' << format_double(r.diff_samples_per_sec) << '\n';
}

// ---------------------------------------------------------------------------
// Phase portrait on 1-DoF systems.

struct EquilibriumEigs {
  std::complex<double> first, second;
};

struct PhasePortrait {
  Vec q_grid, qdot_grid;
  Matd mean_accel;    // rows: q index, cols: qdot index
  Matd accel_spread;  // std over residual draws (0 for deterministic models)
  EquilibriumEigs upright;   // linearization at q = pi, qdot = 0
  EquilibriumEigs downward;  // linearization at q = 0, qdot = 0
  uint64_t seed = 0;
  std::string config_digest;
};

struct GridRange {
  double lo = 0.0, hi = 0.0;
  int steps = 0;
};

inline GridRange parse_range(const std::string& s) {
  GridRange r;
  if (std::sscanf(s.c_str(), "%lf:%lf:%d", &r.lo, &r.hi, &r.steps) != 3 || r.steps < 2 ||
      !(r.hi > r.lo))
    throw DataError("bad range '" + s + "', expected lo:hi:steps");
  return r;
}

inline PhasePortrait eval_phase_portrait(const AnyModel& any, const GridRange& q_range,
                                         const GridRange& qd_range, uint64_t seed) {
  ModelView view = make_view(any);
  if (view.n != 1) throw UnsupportedModelError("phase portraits are defined for 1-DoF models");

  PhasePortrait pp;
  pp.seed = seed;
  pp.config_digest = checkpoint_digest(any);
  pp.q_grid.resize(q_range.steps);
  pp.qdot_grid.resize(qd_range.steps);
  for (int i = 0; i < q_range.steps; ++i)
    pp.q_grid[i] = q_range.lo + (q_range.hi - q_range.lo) * i / (q_range.steps - 1);
  for (int j = 0; j < qd_range.steps; ++j)
    pp.qdot_grid[j] = qd_range.lo + (qd_range.hi - qd_range.lo) * j / (qd_range.steps - 1);

  // common residual draws across the whole portrait keep the mean field
  // smooth in (q, qdot) so finite differences are meaningful
  bool stochastic = (view.accel && view.accel->stochastic) || (view.obs && view.obs->stochastic);
  int n_draws = stochastic ? kEvalDraws : 1;

  auto mean_accel_at = [&](double q, double qd, double* spread_out) {
    Vec samples(n_draws);
    for (int k = 0; k < n_draws; ++k) {
      Rng rng(Rng(seed).fork(k).next_u64());
      if (view.accel) {
        Context ctx{State{{q}, {qd}}, ControlInput{{0.0}}};
        samples[k] = view.accel->accel(ctx, stochastic ? ZPolicy::Sampled : ZPolicy::Zero, 16, rng,
                                       nullptr)[0];
      } else {
        Vec obs = make_obs(view.fc, State{{q}, {qd}});
        Vec next = view.obs->next_obs(obs, Vec{0.0}, ZPolicy::Sampled, 16, rng);
        State ns = obs_to_state(view.fc, next);
        samples[k] = (ns.qdot[0] - qd) / view.dt;
      }
    }
    if (spread_out) *spread_out = stddev(samples);
    return mean(samples);
  };

  pp.mean_accel = Matd(q_range.steps, qd_range.steps, 0.0);
  pp.accel_spread = Matd(q_range.steps, qd_range.steps, 0.0);
  for (int i = 0; i < q_range.steps; ++i)
    for (int j = 0; j < qd_range.steps; ++j) {
      double spread = 0.0;
      pp.mean_accel(i, j) = mean_accel_at(pp.q_grid[i], pp.qdot_grid[j], &spread);
      pp.accel_spread(i, j) = spread;
    }

  // linearization of (qdot, a(q, qdot)) at the two equilibria by central
  // differences on the mean field
  auto eigs_at = [&](double q0) {
    double h = 1e-3;
    double daq = (mean_accel_at(q0 + h, 0.0, nullptr) - mean_accel_at(q0 - h, 0.0, nullptr)) /
                 (2.0 * h);
    double dav = (mean_accel_at(q0, h, nullptr) - mean_accel_at(q0, -h, nullptr)) / (2.0 * h);
    Matd jac(2, 2, 0.0);
    jac(0, 1) = 1.0;
    jac(1, 0) = daq;
    jac(1, 1) = dav;
    auto ev = eigenvalues_2x2(jac);
    return EquilibriumEigs{ev[0], ev[1]};
  };
  pp.upright = eigs_at(M_PI);
  pp.downward = eigs_at(0.0);
  return pp;
}

inline void write_phase_csv(const PhasePortrait& pp, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "# config_digest=" << pp.config_digest << " seed=" << pp.seed << "\n";
  out << "# upright_eigs=" << format_double(pp.upright.first.real()) << "+"
      << format_double(pp.upright.first.imag()) << "i," << format_double(pp.upright.second.real())
      << "+" << format_double(pp.upright.second.imag()) << "i\n";
  out << "# downward_eigs=" << format_double(pp.downward.first.real()) << "+"
      << format_double(pp.downward.first.imag()) << "i,"
      << format_double(pp.downward.second.real()) << "+"
      << format_double(pp.downward.second.imag()) << "i\n";
  out << "q,qdot,qddot_mean,qddot_spread\n";
  for (size_t i = 0; i < pp.q_grid.size(); ++i)
    for (size_t j = 0; j < pp.qdot_grid.size(); ++j)
      out << format_double(pp.q_grid[i]) << ',' << format_double(pp.qdot_grid[j]) << ','
          << format_double(pp.mean_accel(i, j)) << ',' << format_double(pp.accel_spread(i, j))
          << '\n';
}

/// Self-contained SVG quiver of the (qdot, qddot) field over the grid.
inline void write_phase_svg(const PhasePortrait& pp, const std::string& path) {
  int width = 760, height = 560, margin = 50;
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  double q_lo = pp.q_grid.front(), q_hi = pp.q_grid.back();
  double v_lo = pp.qdot_grid.front(), v_hi = pp.qdot_grid.back();
  auto X = [&](double q) { return margin + (q - q_lo) / (q_hi - q_lo) * (width - 2 * margin); };
  auto Y = [&](double v) { return height - margin - (v - v_lo) / (v_hi - v_lo) * (height - 2 * margin); };

  double max_mag = 1e-12;
  for (size_t i = 0; i < pp.q_grid.size(); ++i)
    for (size_t j = 0; j < pp.qdot_grid.size(); ++j)
      max_mag = std::max(max_mag, std::hypot(pp.qdot_grid[j], pp.mean_accel(i, j)));
  double arrow = 0.45 * (width - 2 * margin) / std::max<size_t>(pp.q_grid.size() - 1, 1);

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << width / 2 << "\" y=\"" << height - 12
      << "\" text-anchor=\"middle\" font-size=\"13\">q (rad)</text>\n";
  out << "<text x=\"14\" y=\"" << height / 2
      << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 14 " << height / 2
      << ")\">qdot (rad/s)</text>\n";
  for (size_t i = 0; i < pp.q_grid.size(); ++i) {
    for (size_t j = 0; j < pp.qdot_grid.size(); ++j) {
      double q = pp.q_grid[i], v = pp.qdot_grid[j];
      double dq = v, dv = pp.mean_accel(i, j);
      double mag = std::hypot(dq, dv);
      if (mag < 1e-12) continue;
      double scale = arrow * (0.25 + 0.75 * mag / max_mag) / mag;
      double x0 = X(q), y0 = Y(v);
      double x1 = X(q) + dq * scale, y1 = Y(v) - dv * scale * (height - 2.0 * margin) /
                                              (width - 2.0 * margin);
      out << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y1
          << "\" stroke=\"#31688e\" stroke-width=\"1\"/>\n";
      out << "<circle cx=\"" << x1 << "\" cy=\"" << y1 << "\" r=\"1.6\" fill=\"#31688e\"/>\n";
    }
  }
  // equilibria markers when inside the window
  for (double qe : {0.0, M_PI, -M_PI}) {
    if (qe >= q_lo && qe <= q_hi && 0.0 >= v_lo && 0.0 <= v_hi)
      out << "<circle cx=\"" << X(qe) << "\" cy=\"" << Y(0.0)
          << "\" r=\"5\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.6\"/>\n";
  }
  out << "</svg>\n";
}

}  // namespace stride
