#pragma once

#include <span>
#include <vector>

#include "stride/autodiff.hpp"
#include "stride/common.hpp"
#include "stride/envs.hpp"

namespace stride {

// Input featurization shared by the Lagrangian prior, the flow residual and
// the baselines. Angle coordinates enter the networks as (sin q, cos q) pairs
// to remove the 2*pi discontinuity; all channels are standardized with frozen
// dataset statistics.

struct FeatureConfig {
  int n = 0;
  std::vector<uint8_t> angle;  // per-coordinate flag

  int qfeat_dim() const {
    int d = n;
    for (uint8_t a : angle)
      if (a) ++d;
    return d;
  }
  int context_dim() const { return qfeat_dim() + 2 * n; }

  void validate() const {
    if (n < 1) throw DataError("FeatureConfig: n must be >= 1");
    if (static_cast<int>(angle.size()) != n) throw DataError("FeatureConfig: angle mask size mismatch");
  }
};

/// Per-dimension standardization statistics frozen at training time.
struct NormStats {
  Vec qf_mean, qf_std;    // over q features
  Vec qd_mean, qd_std;    // over velocities
  Vec tau_mean, tau_std;  // over controls
  Vec qdd_mean, qdd_std;  // over accelerations (observation scaling, residual proxy)
  Vec fext_scale;         // residual-force standardization (zero-mean by design)

  static NormStats identity(const FeatureConfig& fc) {
    NormStats s;
    s.qf_mean.assign(fc.qfeat_dim(), 0.0);
    s.qf_std.assign(fc.qfeat_dim(), 1.0);
    s.qd_mean.assign(fc.n, 0.0);
    s.qd_std.assign(fc.n, 1.0);
    s.tau_mean.assign(fc.n, 0.0);
    s.tau_std.assign(fc.n, 1.0);
    s.qdd_mean.assign(fc.n, 0.0);
    s.qdd_std.assign(fc.n, 1.0);
    s.fext_scale.assign(fc.n, 1.0);
    return s;
  }

  void validate(const FeatureConfig& fc) const {
    auto positive = [](const Vec& v) {
      for (double x : v)
        if (!(x > 0.0)) return false;
      return true;
    };
    if (static_cast<int>(qf_std.size()) != fc.qfeat_dim() ||
        static_cast<int>(qd_std.size()) != fc.n)
      throw DataError("NormStats: dimension mismatch");
    if (!positive(qf_std) || !positive(qd_std) || !positive(tau_std) || !positive(qdd_std) ||
        !positive(fext_scale))
      throw DataError("NormStats: std entries must be > 0");
  }
};

/// Raw q features before standardization: (sin q, cos q) per angle, q otherwise.
template <class S>
void raw_q_features(const FeatureConfig& fc, const S* q, S* out) {
  using std::cos;
  using std::sin;
  int j = 0;
  for (int i = 0; i < fc.n; ++i) {
    if (fc.angle[i]) {
      out[j++] = sin(q[i]);
      out[j++] = cos(q[i]);
    } else {
      out[j++] = q[i];
    }
  }
}

/// Standardized q features.
template <class S>
void q_features(const FeatureConfig& fc, const NormStats& ns, const S* q, S* out) {
  raw_q_features(fc, q, out);
  for (int j = 0; j < fc.qfeat_dim(); ++j) out[j] = (out[j] - ns.qf_mean[j]) / ns.qf_std[j];
}

/// Standardized q features carrying d(feature)/d(q[seed]) tangents.
template <class S>
void q_features_dual(const FeatureConfig& fc, const NormStats& ns, const S* q, int seed,
                     ad::Dual<S>* out) {
  using std::cos;
  using std::sin;
  int j = 0;
  for (int i = 0; i < fc.n; ++i) {
    S zero = ad::lift(q[i], 0.0);
    if (fc.angle[i]) {
      if (i == seed) {
        out[j++] = ad::Dual<S>{sin(q[i]), cos(q[i])};
        out[j] = ad::Dual<S>{cos(q[i]), -sin(q[i])};
        ++j;
      } else {
        out[j++] = ad::Dual<S>{sin(q[i]), zero};
        out[j++] = ad::Dual<S>{cos(q[i]), zero};
      }
    } else {
      out[j++] = ad::Dual<S>{q[i], ad::lift(q[i], i == seed ? 1.0 : 0.0)};
    }
  }
  for (int k = 0; k < fc.qfeat_dim(); ++k) {
    out[k].v = (out[k].v - ns.qf_mean[k]) / ns.qf_std[k];
    out[k].d = out[k].d / ns.qf_std[k];
  }
}

/// Standardized conditioning vector (q features, qdot, tau) for the residual.
template <class S>
void context_features(const FeatureConfig& fc, const NormStats& ns, const S* q, const S* qdot,
                      const S* tau, S* out) {
  q_features(fc, ns, q, out);
  int base = fc.qfeat_dim();
  for (int i = 0; i < fc.n; ++i) out[base + i] = (qdot[i] - ns.qd_mean[i]) / ns.qd_std[i];
  base += fc.n;
  for (int i = 0; i < fc.n; ++i) out[base + i] = (tau[i] - ns.tau_mean[i]) / ns.tau_std[i];
}

namespace detail {

inline void mean_std(const std::vector<Vec>& rows, int dim, Vec& mu, Vec& sd,
                     double floor = 1e-8) {
  mu.assign(dim, 0.0);
  sd.assign(dim, 0.0);
  double count = static_cast<double>(rows.size());
  for (const Vec& r : rows)
    for (int j = 0; j < dim; ++j) mu[j] += r[j];
  for (int j = 0; j < dim; ++j) mu[j] /= count;
  for (const Vec& r : rows)
    for (int j = 0; j < dim; ++j) sd[j] += (r[j] - mu[j]) * (r[j] - mu[j]);
  for (int j = 0; j < dim; ++j) sd[j] = std::max(std::sqrt(sd[j] / count), floor);
}

}  // namespace detail

/// Dataset statistics, computed once before training and frozen into the
/// model. The residual-force scale is the spread of the dataset's recorded
/// external-force channel (mean pinned to zero so force-free regions stay at
/// zero in standardized space), floored at a small fraction of the
/// acceleration spread for force-free data.
inline NormStats compute_norm_stats(const TrajectoryDataset& ds, const FeatureConfig& fc) {
  fc.validate();
  NormStats ns;
  int qf = fc.qfeat_dim(), n = fc.n;
  std::vector<Vec> qfeat_rows, qd_rows, tau_rows, qdd_rows, fext_rows;
  qfeat_rows.reserve(ds.records.size());
  Vec feat(qf);
  for (const Record& r : ds.records) {
    raw_q_features<double>(fc, r.q.data(), feat.data());
    qfeat_rows.push_back(feat);
    qd_rows.push_back(r.qdot);
    tau_rows.push_back(r.tau);
    qdd_rows.push_back(r.qddot);
    fext_rows.push_back(r.f_ext);
  }
  detail::mean_std(qfeat_rows, qf, ns.qf_mean, ns.qf_std);
  detail::mean_std(qd_rows, n, ns.qd_mean, ns.qd_std);
  detail::mean_std(tau_rows, n, ns.tau_mean, ns.tau_std);
  detail::mean_std(qdd_rows, n, ns.qdd_mean, ns.qdd_std);
  Vec f_mean, f_std;
  detail::mean_std(fext_rows, n, f_mean, f_std);
  ns.fext_scale.assign(n, 0.0);
  for (int i = 0; i < n; ++i)
    ns.fext_scale[i] = std::max({f_std[i], 0.01 * ns.qdd_std[i], 1e-8});
  ns.validate(fc);
  return ns;
}

inline FeatureConfig feature_config_for(const EnvSpec& env) {
  return FeatureConfig{env.dof(), env.angle_mask()};
}

// ---------------------------------------------------------------------------
// Observation space used by the next-observation models and by rollout error
// metrics: raw q features followed by velocities. Angle coordinates appear as
// sin/cos, which makes the metric wrap-safe.

inline int obs_dim(const FeatureConfig& fc) { return fc.qfeat_dim() + fc.n; }

inline Vec make_obs(const FeatureConfig& fc, const State& s) {
  Vec obs(obs_dim(fc));
  raw_q_features<double>(fc, s.q.data(), obs.data());
  for (int i = 0; i < fc.n; ++i) obs[fc.qfeat_dim() + i] = s.qdot[i];
  return obs;
}

inline void standardize_obs(const FeatureConfig& fc, const NormStats& ns, const double* raw,
                            double* out) {
  int qf = fc.qfeat_dim();
  for (int j = 0; j < qf; ++j) out[j] = (raw[j] - ns.qf_mean[j]) / ns.qf_std[j];
  for (int i = 0; i < fc.n; ++i) out[qf + i] = (raw[qf + i] - ns.qd_mean[i]) / ns.qd_std[i];
}

inline void unstandardize_obs(const FeatureConfig& fc, const NormStats& ns, const double* std_obs,
                              double* raw) {
  int qf = fc.qfeat_dim();
  for (int j = 0; j < qf; ++j) raw[j] = std_obs[j] * ns.qf_std[j] + ns.qf_mean[j];
  for (int i = 0; i < fc.n; ++i) raw[qf + i] = std_obs[qf + i] * ns.qd_std[i] + ns.qd_mean[i];
}

/// Decode an observation back to a state; angles recovered by atan2 (wrapped).
inline State obs_to_state(const FeatureConfig& fc, std::span<const double> obs) {
  State s;
  s.q.resize(fc.n);
  s.qdot.resize(fc.n);
  int j = 0;
  for (int i = 0; i < fc.n; ++i) {
    if (fc.angle[i]) {
      double sn = obs[j], cs = obs[j + 1];
      s.q[i] = std::atan2(sn, cs);
      j += 2;
    } else {
      s.q[i] = obs[j++];
    }
  }
  for (int i = 0; i < fc.n; ++i) s.qdot[i] = obs[fc.qfeat_dim() + i];
  return s;
}

}  // namespace stride
