#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stride/common.hpp"

namespace stride {

// Desk-scale analytic environments. Angles are measured from the downward
// vertical; q = pi is the upright configuration.

enum class EnvKind { Pendulum, BouncingPendulum, CartpoleFriction };
enum class IntegratorKind { Rk4, SemiImplicitEuler };

inline std::string env_kind_name(EnvKind k) {
  switch (k) {
    case EnvKind::Pendulum: return "pendulum";
    case EnvKind::BouncingPendulum: return "bouncing_pendulum";
    case EnvKind::CartpoleFriction: return "cartpole_friction";
  }
  return "?";
}

inline EnvKind env_kind_from_name(const std::string& s) {
  if (s == "pendulum") return EnvKind::Pendulum;
  if (s == "bouncing_pendulum") return EnvKind::BouncingPendulum;
  if (s == "cartpole_friction") return EnvKind::CartpoleFriction;
  throw DataError("unknown environment kind: " + s);
}

struct EnvSpec {
  EnvKind kind = EnvKind::Pendulum;
  double dt = 2e-3;  // s
  IntegratorKind integrator = IntegratorKind::Rk4;

  // pendulum family
  double mass = 1.0;      // kg
  double length = 1.0;    // m
  double gravity = 9.81;  // m/s^2
  double viscous = 0.0;   // N*m*s/rad, pendulum pivot damping (part of f_ext)

  // bouncing pendulum wall (one-sided penalty contact)
  double wall_angle = 0.5;         // rad
  double contact_stiffness = 500;  // N*m/rad
  double contact_damping = 5.0;    // N*m*s/rad

  // cartpole
  double cart_mass = 1.0;         // kg
  double pole_mass = 0.3;         // kg
  double pole_length = 0.5;       // m
  double coulomb_friction = 0.5;  // N
  double viscous_friction = 0.1;  // N*s/m

  int dof() const { return kind == EnvKind::CartpoleFriction ? 2 : 1; }

  /// Which coordinates are angles (fed to nets as sin/cos pairs).
  std::vector<uint8_t> angle_mask() const {
    if (kind == EnvKind::CartpoleFriction) return {0, 1};
    return {1};
  }

  /// Per-channel excitation scale: about twice the gravity torque/force.
  Vec torque_scale() const {
    double g_torque = mass * gravity * length;
    if (kind == EnvKind::CartpoleFriction)
      return {2.0 * (cart_mass + pole_mass) * gravity * 0.5, 2.0 * pole_mass * gravity * pole_length};
    return {2.0 * g_torque};
  }

  void validate() const {
    if (!(dt > 0.0 && dt <= 0.05)) throw DataError("EnvSpec: dt must be in (0, 0.05]");
    if (mass <= 0 || length <= 0 || gravity <= 0) throw DataError("EnvSpec: nonpositive physical parameter");
    if (kind == EnvKind::BouncingPendulum && (contact_stiffness <= 0 || contact_damping < 0))
      throw DataError("EnvSpec: invalid contact parameters");
    if (kind == EnvKind::CartpoleFriction && (cart_mass <= 0 || pole_mass <= 0 || pole_length <= 0))
      throw DataError("EnvSpec: invalid cartpole parameters");
  }
};

struct DynResult {
  Vec qddot;
  Vec f_ext;  // generalized non-conservative force actually applied
};

/// Analytic forward dynamics plus the ground-truth external force.
inline DynResult true_dynamics(const EnvSpec& env, const State& s, std::span<const double> tau) {
  switch (env.kind) {
    case EnvKind::Pendulum:
    case EnvKind::BouncingPendulum: {
      double q = s.q[0], qd = s.qdot[0];
      double inertia = env.mass * env.length * env.length;
      double grav = env.mass * env.gravity * env.length * std::sin(q);
      double f = 0.0;
      if (env.viscous > 0.0) f -= env.viscous * qd;
      if (env.kind == EnvKind::BouncingPendulum) {
        // The wall blocks the whole ray at wall_angle: approaching from below
        // penetrates its lower face, a full revolution the other way hits the
        // upper face at wall_angle - 2*pi. Spring-damper penalty on both.
        double pen_hi = q - env.wall_angle;
        double pen_lo = (env.wall_angle - 2.0 * M_PI) - q;
        if (pen_hi > 0.0)
          f += -env.contact_stiffness * pen_hi - env.contact_damping * qd;
        else if (pen_lo > 0.0)
          f += env.contact_stiffness * pen_lo - env.contact_damping * qd;
      }
      double qdd = (tau[0] + f - grav) / inertia;
      return {{qdd}, {f}};
    }
    case EnvKind::CartpoleFriction: {
      double th = s.q[1], xd = s.qdot[0], thd = s.qdot[1];
      double mc = env.cart_mass, mp = env.pole_mass, l = env.pole_length, g = env.gravity;
      double c = std::cos(th), sn = std::sin(th);
      // M qdd + C qd + g = tau + f_ext, theta measured from the downward vertical
      double m00 = mc + mp, m01 = mp * l * c, m11 = mp * l * l;
      double c0 = -mp * l * sn * thd * thd;
      double g1 = mp * g * l * sn;
      double sgn = xd > 0.0 ? 1.0 : (xd < 0.0 ? -1.0 : 0.0);
      double f_cart = -env.coulomb_friction * sgn - env.viscous_friction * xd;
      double b0 = tau[0] + f_cart - c0;
      double b1 = tau[1] - g1;
      double det = m00 * m11 - m01 * m01;
      return {{(m11 * b0 - m01 * b1) / det, (m00 * b1 - m01 * b0) / det}, {f_cart, 0.0}};
    }
  }
  throw DataError("true_dynamics: bad env kind");
}

/// Total analytic mechanical energy (kinetic + potential); oracle for
/// conservation tests on the frictionless pendulum.
inline double analytic_energy(const EnvSpec& env, const State& s) {
  switch (env.kind) {
    case EnvKind::Pendulum:
    case EnvKind::BouncingPendulum: {
      double inertia = env.mass * env.length * env.length;
      double e = 0.5 * inertia * s.qdot[0] * s.qdot[0] -
                 env.mass * env.gravity * env.length * std::cos(s.q[0]);
      if (env.kind == EnvKind::BouncingPendulum) {
        double pen_hi = s.q[0] - env.wall_angle;
        double pen_lo = (env.wall_angle - 2.0 * M_PI) - s.q[0];
        if (pen_hi > 0.0) e += 0.5 * env.contact_stiffness * pen_hi * pen_hi;
        if (pen_lo > 0.0) e += 0.5 * env.contact_stiffness * pen_lo * pen_lo;
      }
      return e;
    }
    case EnvKind::CartpoleFriction: {
      double mc = env.cart_mass, mp = env.pole_mass, l = env.pole_length;
      double xd = s.qdot[0], thd = s.qdot[1], th = s.q[1];
      double ke = 0.5 * (mc + mp) * xd * xd + mp * l * std::cos(th) * xd * thd +
                  0.5 * mp * l * l * thd * thd;
      return ke - mp * env.gravity * l * std::cos(th);
    }
  }
  throw DataError("analytic_energy: bad env kind");
}

/// One integrator step of env.dt with tau held constant.
inline State env_step(const EnvSpec& env, const State& s, std::span<const double> tau) {
  int n = env.dof();
  double h = env.dt;
  if (env.integrator == IntegratorKind::SemiImplicitEuler) {
    State out = s;
    Vec qdd = true_dynamics(env, s, tau).qddot;
    for (int i = 0; i < n; ++i) {
      out.qdot[i] = s.qdot[i] + h * qdd[i];
      out.q[i] = s.q[i] + h * out.qdot[i];
    }
    return out;
  }
  // classic RK4 on the state (q, qdot)
  auto deriv = [&](const State& x) {
    DynResult d = true_dynamics(env, x, tau);
    return std::pair<Vec, Vec>(x.qdot, d.qddot);
  };
  auto advance = [&](const State& x, const std::pair<Vec, Vec>& k, double scale) {
    State y = x;
    for (int i = 0; i < n; ++i) {
      y.q[i] = s.q[i] + scale * k.first[i];
      y.qdot[i] = s.qdot[i] + scale * k.second[i];
    }
    return y;
  };
  auto k1 = deriv(s);
  auto k2 = deriv(advance(s, k1, h / 2.0));
  auto k3 = deriv(advance(s, k2, h / 2.0));
  auto k4 = deriv(advance(s, k3, h));
  State out = s;
  for (int i = 0; i < n; ++i) {
    out.q[i] = s.q[i] + h / 6.0 * (k1.first[i] + 2.0 * k2.first[i] + 2.0 * k3.first[i] + k4.first[i]);
    out.qdot[i] =
        s.qdot[i] + h / 6.0 * (k1.second[i] + 2.0 * k2.second[i] + 2.0 * k3.second[i] + k4.second[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trajectory data.

struct Record {
  double t;
  Vec q, qdot, tau;
  Vec qddot;  // true instantaneous acceleration, recorded pre-noise
  Vec f_ext;  // true external force, recorded pre-noise
};

struct TrajectoryDataset {
  static constexpr int kSchemaVersion = 1;
  EnvSpec env;
  Vec noise_std;  // per logged channel: q (n), qdot (n), tau (n)
  uint64_t seed = 0;
  double dt = 0.0;  // record spacing (env.dt * subsample)
  std::vector<Record> records;

  int dof() const { return env.dof(); }
  size_t size() const { return records.size(); }

  void validate() const {
    env.validate();
    if (records.empty()) throw DataError("dataset has no records");
    int n = dof();
    for (size_t i = 0; i < records.size(); ++i) {
      const Record& r = records[i];
      if (static_cast<int>(r.q.size()) != n || static_cast<int>(r.qdot.size()) != n ||
          static_cast<int>(r.tau.size()) != n || static_cast<int>(r.qddot.size()) != n ||
          static_cast<int>(r.f_ext.size()) != n)
        throw DataError("dataset record " + std::to_string(i) + " has inconsistent dimensions");
      if (i > 0 && !(r.t > records[i - 1].t))
        throw DataError("dataset timestamps not strictly increasing at record " + std::to_string(i));
    }
  }
};

enum class ExcitationPolicy { RandomTorque, SineSweep, MppiExpert };

inline ExcitationPolicy policy_from_name(const std::string& s) {
  if (s == "random_torque") return ExcitationPolicy::RandomTorque;
  if (s == "sine_sweep") return ExcitationPolicy::SineSweep;
  if (s == "mppi_expert") return ExcitationPolicy::MppiExpert;
  throw DataError("unknown excitation policy: " + s);
}

/// Controller callback used by the MppiExpert policy (wired up by the CLI so
/// the data module stays independent of the planner).
using ExpertController = std::function<Vec(const State&, double t, Rng&)>;

/// Simulate one trajectory under the chosen excitation. True qddot and f_ext
/// are recorded pre-noise; iid Gaussian noise of the declared std is added to
/// the logged q, qdot and tau channels only. With subsample > 1 every k-th
/// state is recorded and the dataset dt becomes env.dt * k.
inline TrajectoryDataset generate_dataset(const EnvSpec& env, ExcitationPolicy policy,
                                          int n_steps, double noise, uint64_t seed,
                                          int subsample = 1,
                                          const ExpertController& expert = nullptr) {
  env.validate();
  if (n_steps < 1) throw DataError("generate_dataset: n_steps must be >= 1");
  if (subsample < 1) throw DataError("generate_dataset: subsample must be >= 1");
  if (policy == ExcitationPolicy::MppiExpert && !expert)
    throw DataError("generate_dataset: mppi_expert policy needs a controller");

  int n = env.dof();
  TrajectoryDataset ds;
  ds.env = env;
  ds.seed = seed;
  ds.dt = env.dt * subsample;
  ds.noise_std.assign(3 * static_cast<size_t>(n), noise);

  Rng excitation_rng = Rng(seed).fork(0);
  Rng noise_rng = Rng(seed).fork(1);
  Rng init_rng = Rng(seed).fork(2);

  State s;
  s.q.assign(n, 0.0);
  s.qdot.assign(n, 0.0);
  for (int i = 0; i < n; ++i) {
    s.q[i] = init_rng.uniform(-0.5, 0.5);
    s.qdot[i] = init_rng.uniform(-0.5, 0.5);
  }

  Vec scale = env.torque_scale();
  Vec tau(n, 0.0);
  int hold_steps = std::max(1, static_cast<int>(std::llround(0.2 / env.dt)));
  double sweep_f0 = 0.2, sweep_f1 = 2.0;
  double total_time = n_steps * env.dt;

  ds.records.reserve(n_steps / subsample + 1);
  for (int step = 0; step < n_steps; ++step) {
    double t = step * env.dt;
    switch (policy) {
      case ExcitationPolicy::RandomTorque:
        if (step % hold_steps == 0)
          for (int i = 0; i < n; ++i) tau[i] = excitation_rng.uniform(-scale[i], scale[i]);
        break;
      case ExcitationPolicy::SineSweep: {
        double f = sweep_f0 + (sweep_f1 - sweep_f0) * (t / total_time);
        for (int i = 0; i < n; ++i) tau[i] = scale[i] * std::sin(2.0 * M_PI * f * t + 0.7 * i);
        break;
      }
      case ExcitationPolicy::MppiExpert:
        if (step % hold_steps == 0) tau = expert(s, t, excitation_rng);
        break;
    }

    if (step % subsample == 0) {
      DynResult d = true_dynamics(env, s, tau);
      Record r;
      r.t = t;
      r.q = s.q;
      r.qdot = s.qdot;
      r.tau = tau;
      r.qddot = d.qddot;
      r.f_ext = d.f_ext;
      if (noise > 0.0) {
        for (int i = 0; i < n; ++i) r.q[i] += ds.noise_std[i] * noise_rng.normal();
        for (int i = 0; i < n; ++i) r.qdot[i] += ds.noise_std[n + i] * noise_rng.normal();
        for (int i = 0; i < n; ++i) r.tau[i] += ds.noise_std[2 * n + i] * noise_rng.normal();
      }
      ds.records.push_back(std::move(r));
    }
    s = env_step(env, s, tau);
  }
  return ds;
}

/// Number of distinct penetration episodes (rising edges of nonzero f_ext
/// caused by contact) in a bouncing-pendulum dataset.
inline int count_contact_events(const TrajectoryDataset& ds) {
  int events = 0;
  bool in_contact = false;
  for (const Record& r : ds.records) {
    bool c = r.q[0] > ds.env.wall_angle || r.q[0] < ds.env.wall_angle - 2.0 * M_PI;
    if (c && !in_contact) ++events;
    in_contact = c;
  }
  return events;
}

/// A record is "in contact" when the true external force is active.
inline bool record_in_contact(const Record& r, double tol = 1e-12) {
  for (double f : r.f_ext)
    if (std::abs(f) > tol) return true;
  return false;
}

/// Plug-in model backed by the analytic dynamics; used for oracle evaluation
/// and oracle-model planning.
struct OracleModel {
  EnvSpec env;
};

}  // namespace stride
