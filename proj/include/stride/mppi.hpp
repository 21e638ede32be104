#pragma once

#include <chrono>
#include <fstream>
#include <functional>
#include <thread>
#include <vector>

#include "stride/eval.hpp"

namespace stride {

// Model predictive path integral control over any acceleration model.
// Perturbed control sequences are rolled out with semi-implicit Euler at the
// planner timestep, weighted by exponentiated negative cost and averaged into
// the nominal sequence. Stochastic models draw fresh residual noise per
// rollout step, which is the intended way to expose model uncertainty to the
// planner; z_policy = Zero switches to mean-flow rollouts for ablations.

struct MppiConfig {
  int horizon = 30;
  int n_samples = 256;
  double temperature = 1.0;
  Vec noise_std;  // per control channel
  Vec u_min, u_max;
  double dt = 0.02;  // planner step, a multiple of the simulator step
  int nfe = 4;
  ZPolicy z_policy = ZPolicy::Sampled;
  // quadratic swing-up cost: angle error to upright, velocity, effort, and a
  // bonus while inside the upright neighborhood
  double w_angle = 12.0;
  double w_vel = 0.12;
  double w_effort = 1e-3;
  double upright_bonus = 4.0;

  void validate() const {
    if (horizon < 1 || n_samples < 1) throw DataError("MppiConfig: horizon and n_samples >= 1");
    if (!(temperature > 0)) throw DataError("MppiConfig: temperature must be > 0");
    if (noise_std.empty() || u_min.size() != noise_std.size() || u_max.size() != noise_std.size())
      throw DataError("MppiConfig: noise_std/u_min/u_max must share the control dimension");
    if (!(dt > 0)) throw DataError("MppiConfig: dt must be > 0");
  }
};

/// One acceleration query; stochastic models consume the rng.
using PlannerModel = std::function<Vec(const State&, const Vec& tau, Rng&)>;

inline PlannerModel planner_model_from(const AnyModel& any, ZPolicy zp, int nfe) {
  ModelView view = make_view(any);
  if (!view.accel)
    throw UnsupportedModelError("planning needs an acceleration-space model, got '" + view.kind +
                                "'");
  AccelView av = *view.accel;
  return [av, zp, nfe](const State& s, const Vec& tau, Rng& rng) {
    Context ctx{s, ControlInput{tau}};
    return av.accel(ctx, zp, nfe, rng, nullptr);
  };
}

inline constexpr double kTruncatedRolloutCost = 1e9;

struct ModelRollout {
  std::vector<State> states;  // horizon + 1 entries on success
  bool truncated = false;
};

/// Semi-implicit Euler propagation of the model under a control sequence.
/// A non-finite prediction truncates the rollout.
inline ModelRollout rollout_model(const PlannerModel& model, const State& start,
                                  const Matd& controls, double dt, Rng& rng) {
  int H = controls.rows;
  int n = start.dof();
  ModelRollout out;
  out.states.reserve(H + 1);
  out.states.push_back(start);
  State s = start;
  Vec tau(n);
  for (int t = 0; t < H; ++t) {
    for (int i = 0; i < n; ++i) tau[i] = controls(t, i);
    bool ok = true;
    try {
      Vec a = model(s, tau, rng);
      ok = all_finite(a);
      if (ok) {
        for (int i = 0; i < n; ++i) {
          s.qdot[i] += dt * a[i];
          s.q[i] += dt * s.qdot[i];
        }
        ok = all_finite(s.q) && all_finite(s.qdot);
      }
    } catch (const NumericalError&) {
      ok = false;  // a blown-up model query counts as a failed rollout
    }
    if (!ok) {
      out.truncated = true;
      return out;
    }
    out.states.push_back(s);
  }
  return out;
}

/// Running cost: state and control at one horizon step.
using CostFn = std::function<double(const State&, std::span<const double> u, int step)>;

inline CostFn swingup_cost(const MppiConfig& cfg) {
  return [cfg](const State& s, std::span<const double> u, int) {
    double ang = wrap_angle(s.q[0] - M_PI);
    double c = cfg.w_angle * ang * ang + cfg.w_vel * s.qdot[0] * s.qdot[0];
    for (double ui : u) c += cfg.w_effort * ui * ui;
    if (std::abs(ang) < 0.2 && std::abs(s.qdot[0]) < 1.0) c -= cfg.upright_bonus;
    return c;
  };
}

struct MppiDiagnostics {
  double best_cost = 0.0;
  double weight_entropy = 0.0;
  double max_weight = 0.0;
  double model_call_ms = 0.0;  // mean wall-clock per model call in this step
  bool degraded = false;       // every rollout went non-finite
};

struct MppiStepResult {
  Vec action;
  Matd nominal;  // updated control sequence
  Vec weights;   // per-sample importance weights, summing to one
  MppiDiagnostics diag;
};

/// One planning step: sample, roll out, weight, average.
inline MppiStepResult mppi_step(const PlannerModel& model, const State& state, const Matd& nominal,
                                const MppiConfig& cfg, const CostFn& cost, uint64_t step_seed) {
  cfg.validate();
  int H = cfg.horizon, n = static_cast<int>(cfg.noise_std.size());
  if (nominal.rows != H || nominal.cols != n) throw DataError("mppi_step: nominal shape mismatch");

  int S = cfg.n_samples;
  std::vector<Matd> candidates(S);
  Vec costs(S, kTruncatedRolloutCost);
  long long total_calls = 0;
  double total_secs = 0.0;

  // fixed four-way chunking keeps the reduction order independent of the
  // worker count
  constexpr int kChunks = 4;
  std::vector<long long> chunk_calls(kChunks, 0);
  std::vector<double> chunk_secs(kChunks, 0.0);
  std::vector<std::string> chunk_error(kChunks);
  auto run_chunk = [&](int c) {
    auto t0 = std::chrono::steady_clock::now();
    int lo = static_cast<int>(static_cast<long long>(S) * c / kChunks);
    int hi = static_cast<int>(static_cast<long long>(S) * (c + 1) / kChunks);
    try {
      for (int i = lo; i < hi; ++i) {
        Rng rng = Rng(step_seed).fork(static_cast<uint64_t>(i));
        Matd u(H, n);
        for (int t = 0; t < H; ++t)
          for (int k = 0; k < n; ++k) {
            double v = nominal(t, k) + cfg.noise_std[k] * rng.normal();
            u(t, k) = std::min(cfg.u_max[k], std::max(cfg.u_min[k], v));
          }
        ModelRollout ro = rollout_model(model, state, u, cfg.dt, rng);
        double S_i = 0.0;
        if (ro.truncated) {
          S_i = kTruncatedRolloutCost;
        } else {
          for (int t = 0; t < H; ++t) {
            Vec ut(n);
            for (int k = 0; k < n; ++k) ut[k] = u(t, k);
            S_i += cost(ro.states[t + 1], ut, t);
          }
        }
        candidates[i] = std::move(u);
        costs[i] = S_i;
        chunk_calls[c] += H;
      }
    } catch (const std::exception& e) {
      chunk_error[c] = e.what();
    }
    chunk_secs[c] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (std::max(1, hw) > 1 && S >= kChunks) {
    std::vector<std::thread> workers;
    for (int c = 0; c < kChunks; ++c) workers.emplace_back(run_chunk, c);
    for (auto& w : workers) w.join();
  } else {
    for (int c = 0; c < kChunks; ++c) run_chunk(c);
  }
  for (int c = 0; c < kChunks; ++c) {
    if (!chunk_error[c].empty()) throw NumericalError("mppi_step rollout failed: " + chunk_error[c]);
    total_calls += chunk_calls[c];
    total_secs += chunk_secs[c];
  }

  MppiStepResult result;
  result.diag.best_cost = *std::min_element(costs.begin(), costs.end());
  result.diag.model_call_ms = total_calls ? 1e3 * total_secs / total_calls : 0.0;

  if (result.diag.best_cost >= kTruncatedRolloutCost) {
    // every rollout failed: hold the nominal plan and flag it
    result.diag.degraded = true;
    result.nominal = nominal;
    result.action.resize(n);
    for (int k = 0; k < n; ++k) result.action[k] = nominal(0, k);
    result.weights.assign(S, 0.0);
    return result;
  }

  double beta = result.diag.best_cost;
  result.weights.resize(S);
  double z = 0.0;
  for (int i = 0; i < S; ++i) {
    result.weights[i] = std::exp(-(costs[i] - beta) / cfg.temperature);
    z += result.weights[i];
  }
  double entropy = 0.0, max_w = 0.0;
  for (int i = 0; i < S; ++i) {
    result.weights[i] /= z;
    if (result.weights[i] > 0.0) entropy -= result.weights[i] * std::log(result.weights[i]);
    max_w = std::max(max_w, result.weights[i]);
  }
  result.diag.weight_entropy = entropy;
  result.diag.max_weight = max_w;

  result.nominal = Matd(H, n, 0.0);
  for (int i = 0; i < S; ++i) {
    double w = result.weights[i];
    if (w == 0.0) continue;
    for (int t = 0; t < H; ++t)
      for (int k = 0; k < n; ++k) result.nominal(t, k) += w * candidates[i](t, k);
  }
  result.action.resize(n);
  for (int k = 0; k < n; ++k) result.action[k] = result.nominal(0, k);
  return result;
}

// ---------------------------------------------------------------------------
// Closed-loop swing-up on the true simulator.

struct PlanStepRow {
  double t = 0.0;
  State state;
  Vec action;
  double best_cost = 0.0;
  double weight_entropy = 0.0;
  double model_call_ms = 0.0;
  bool degraded = false;
};

struct PlanResult {
  std::vector<PlanStepRow> rows;
  bool success = false;
  double success_time = -1.0;  // first time the upright hold completes
  double mean_model_call_ms = 0.0;
  double mean_step_ms = 0.0;
  bool within_50hz_budget = false;  // mean planner step under 20 ms
  uint64_t seed = 0;
  std::string config_digest;
};

/// Run MPPI swing-up against the analytic simulator for `seconds`. Success
/// means |q - pi| < 0.2 rad held for at least 0.1 s within the run.
inline PlanResult run_swingup(const EnvSpec& true_env, const PlannerModel& model,
                              const MppiConfig& cfg, double seconds, uint64_t seed) {
  cfg.validate();
  true_env.validate();
  if (true_env.dof() != 1) throw DataError("run_swingup: 1-DoF environments only");
  int sim_per_plan = static_cast<int>(std::llround(cfg.dt / true_env.dt));
  if (sim_per_plan < 1 || std::abs(sim_per_plan * true_env.dt - cfg.dt) > 1e-9)
    throw DataError("run_swingup: planner dt must be a multiple of the simulator dt");

  Rng rng(seed);
  State s{{rng.uniform(-0.1, 0.1)}, {rng.uniform(-0.1, 0.1)}};
  Matd nominal(cfg.horizon, 1, 0.0);

  PlanResult result;
  result.seed = seed;
  int n_steps = static_cast<int>(std::llround(seconds / cfg.dt));
  int hold_needed = std::max(1, static_cast<int>(std::llround(0.1 / cfg.dt)));
  int hold = 0;
  double total_model_ms = 0.0, total_step_ms = 0.0;

  for (int step = 0; step < n_steps; ++step) {
    auto t0 = std::chrono::steady_clock::now();
    MppiStepResult plan = mppi_step(model, s, nominal, cfg, swingup_cost(cfg),
                                    rng.fork(static_cast<uint64_t>(step)).next_u64());
    double step_ms =
        1e3 * std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    PlanStepRow row;
    row.t = step * cfg.dt;
    row.state = s;
    row.action = plan.action;
    row.best_cost = plan.diag.best_cost;
    row.weight_entropy = plan.diag.weight_entropy;
    row.model_call_ms = plan.diag.model_call_ms;
    row.degraded = plan.diag.degraded;
    result.rows.push_back(row);
    total_model_ms += plan.diag.model_call_ms;
    total_step_ms += step_ms;

    for (int k = 0; k < sim_per_plan; ++k) s = env_step(true_env, s, plan.action);

    // receding horizon: shift and repeat the tail
    nominal = plan.nominal;
    for (int t = 0; t + 1 < cfg.horizon; ++t) nominal(t, 0) = nominal(t + 1, 0);

    if (std::abs(wrap_angle(s.q[0] - M_PI)) < 0.2) {
      if (++hold >= hold_needed && !result.success) {
        result.success = true;
        result.success_time = (step + 1) * cfg.dt;
      }
    } else {
      hold = 0;
    }
  }
  result.mean_model_call_ms = total_model_ms / std::max(1, n_steps);
  result.mean_step_ms = total_step_ms / std::max(1, n_steps);
  result.within_50hz_budget = result.mean_step_ms <= 20.0;
  return result;
}

inline void write_plan_csv(const PlanResult& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "# seed=" << r.seed << " digest=" << r.config_digest
      << " success=" << (r.success ? 1 : 0) << " success_time=" << format_double(r.success_time)
      << " mean_model_call_ms=" << format_double(r.mean_model_call_ms)
      << " mean_step_ms=" << format_double(r.mean_step_ms)
      << " within_50hz_budget=" << (r.within_50hz_budget ? 1 : 0) << "\n";
  out << "t,q,qdot,action,best_cost,weight_entropy,model_call_ms,degraded\n";
  for (const PlanStepRow& row : r.rows) {
    out << format_double(row.t) << ',' << format_double(row.state.q[0]) << ','
        << format_double(row.state.qdot[0]) << ',' << format_double(row.action[0]) << ','
        << format_double(row.best_cost) << ',' << format_double(row.weight_entropy) << ','
        << format_double(row.model_call_ms) << ',' << (row.degraded ? 1 : 0) << '\n';
  }
}

}  // namespace stride
