#pragma once

#include <span>
#include <vector>

#include "stride/autodiff.hpp"
#include "stride/common.hpp"
#include "stride/features.hpp"
#include "stride/nets.hpp"

namespace stride {

// Conditional flow-matching residual. A context-conditioned vector field
// v(z, t | c) is trained to transport standard normal noise to the
// standardized residual-force distribution along the linear conditional-OT
// path z_t = (1 - (1 - sigma_min) t) z0 + t x1. Sampling integrates the field
// from t = 0 to 1 with explicit Euler; the number of steps is the NFE budget.

struct FlowFieldParams {
  MlpSpec spec;  // input: n + time_embed_dim + context_dim, output: n
  ParamVector net;
  int time_embed_dim = 16;
};

inline FlowFieldParams make_flow_params(const FeatureConfig& fc, const std::vector<int>& hidden,
                                        uint64_t seed, int time_embed_dim = 16,
                                        Act act = Act::Tanh) {
  fc.validate();
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
    throw DataError("time_embed_dim must be a positive even number");
  FlowFieldParams f;
  f.time_embed_dim = time_embed_dim;
  f.spec = MlpSpec{fc.n + time_embed_dim + fc.context_dim(), hidden, fc.n, act};
  f.net = init_params(f.spec, seed);
  return f;
}

/// Sine/cosine features of t at geometrically spaced frequencies.
inline void time_embedding(double t, int dim, double* out) {
  for (int k = 0; k < dim / 2; ++k) {
    double freq = static_cast<double>(1 << k);
    out[2 * k] = std::sin(freq * t);
    out[2 * k + 1] = std::cos(freq * t);
  }
}

template <class S>
struct FlowWork {
  std::vector<S> input;
  std::vector<double> embed;
  MlpWork<S> mlp;
};

/// Evaluate v(z, t | c). `ctx` is the standardized conditioning vector.
template <class S>
void flow_field(const FlowFieldParams& f, const S* params, const S* z, int n, double t,
                std::span<const S> ctx, S* out, FlowWork<S>& work) {
  work.embed.resize(f.time_embed_dim);
  time_embedding(t, f.time_embed_dim, work.embed.data());
  work.input.clear();
  work.input.reserve(f.spec.input_dim);
  for (int i = 0; i < n; ++i) work.input.push_back(z[i]);
  for (double e : work.embed) work.input.push_back(ad::lift(z[0], e));
  for (const S& c : ctx) work.input.push_back(c);
  mlp_forward<S, S>(f.spec, params, std::span<const S>(work.input), out, work.mlp);
}

/// Integrate dz/dt = v(z, t | c) from t=0 to t=1 in `nfe` Euler steps,
/// starting at z0 (standard normal draw supplied by the caller). Output is in
/// standardized residual units.
template <class S>
void sample_residual(const FlowFieldParams& f, const S* params, std::span<const S> ctx,
                     std::span<const S> z0, int nfe, S* out, FlowWork<S>& work,
                     std::vector<S>& z_buf, std::vector<S>& v_buf) {
  int n = static_cast<int>(z0.size());
  if (nfe < 1) throw DataError("sample_residual: nfe must be >= 1");
  z_buf.assign(z0.begin(), z0.end());
  v_buf.assign(n, ad::lift(z0[0], 0.0));
  double h = 1.0 / nfe;
  for (int step = 0; step < nfe; ++step) {
    double t = static_cast<double>(step) / nfe;
    try {
      flow_field<S>(f, params, z_buf.data(), n, t, ctx, v_buf.data(), work);
      for (int i = 0; i < n; ++i) {
        z_buf[i] = ad::muladd(v_buf[i], h, z_buf[i]);
        if (!std::isfinite(ad::value_of(z_buf[i])))
          throw NumericalError("non-finite flow state");
      }
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " during flow integration step " +
                           std::to_string(step));
    }
  }
  for (int i = 0; i < n; ++i) out[i] = z_buf[i];
}

/// Convenience double-path sampler.
inline Vec sample_residual(const FlowFieldParams& f, std::span<const double> ctx,
                           std::span<const double> z0, int nfe) {
  Vec out(z0.size());
  FlowWork<double> work;
  std::vector<double> zb, vb;
  sample_residual<double>(f, f.net.flat.data(), ctx, z0, nfe, out.data(), work, zb, vb);
  return out;
}

/// Interpolant state and regression target of the conditional-OT path.
struct CfmPair {
  Vec z_t;
  Vec u_target;
};

inline CfmPair cfm_training_pair(std::span<const double> x1, std::span<const double> z0, double t,
                                 double sigma_min) {
  if (!(t >= 0.0 && t <= 1.0)) throw DataError("cfm_training_pair: t must be in [0,1]");
  CfmPair pair;
  pair.z_t.resize(x1.size());
  pair.u_target.resize(x1.size());
  double keep = 1.0 - (1.0 - sigma_min) * t;
  for (size_t i = 0; i < x1.size(); ++i) {
    pair.z_t[i] = keep * z0[i] + t * x1[i];
    pair.u_target[i] = x1[i] - (1.0 - sigma_min) * z0[i];
  }
  return pair;
}

/// Squared regression error of the field against the path velocity for one
/// sampled (z0, t) pair. x1 is the standardized residual target.
template <class S>
S flow_matching_loss(const FlowFieldParams& f, const S* params, std::span<const S> ctx,
                     std::span<const double> x1, std::span<const double> z0, double t,
                     double sigma_min, FlowWork<S>& work) {
  int n = static_cast<int>(x1.size());
  CfmPair pair = cfm_training_pair(x1, z0, t, sigma_min);
  std::vector<S> z_t(n), v(n, ad::lift(ctx[0], 0.0));
  for (int i = 0; i < n; ++i) z_t[i] = ad::lift(ctx[0], pair.z_t[i]);
  flow_field<S>(f, params, z_t.data(), n, t, ctx, v.data(), work);
  S loss = (v[0] - pair.u_target[0]) * (v[0] - pair.u_target[0]);
  for (int i = 1; i < n; ++i) loss = loss + (v[i] - pair.u_target[i]) * (v[i] - pair.u_target[i]);
  return loss;
}

inline double flow_matching_loss(const FlowFieldParams& f, std::span<const double> ctx,
                                 std::span<const double> x1, std::span<const double> z0, double t,
                                 double sigma_min) {
  FlowWork<double> work;
  return flow_matching_loss<double>(f, f.net.flat.data(), ctx, x1, z0, t, sigma_min, work);
}

}  // namespace stride
