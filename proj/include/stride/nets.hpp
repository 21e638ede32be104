#pragma once

#include <array>
#include <span>
#include <vector>

#include "stride/autodiff.hpp"
#include "stride/common.hpp"

namespace stride {

enum class Act { Tanh, Softplus, Relu };

/// Shape of a feed-forward network: affine layers with the chosen activation
/// on every hidden layer and a plain affine output.
struct MlpSpec {
  int input_dim = 0;
  std::vector<int> hidden;
  int output_dim = 0;
  Act act = Act::Tanh;

  void validate() const {
    if (input_dim < 1 || output_dim < 1) throw DataError("MlpSpec: dims must be >= 1");
    for (int h : hidden)
      if (h < 1) throw DataError("MlpSpec: hidden widths must be >= 1");
  }

  int num_layers() const { return static_cast<int>(hidden.size()) + 1; }

  std::array<int, 2> layer_dims(int l) const {
    int in = l == 0 ? input_dim : hidden[l - 1];
    int out = l == num_layers() - 1 ? output_dim : hidden[l];
    return {in, out};
  }

  int param_count() const {
    int total = 0;
    for (int l = 0; l < num_layers(); ++l) {
      auto [in, out] = layer_dims(l);
      total += in * out + out;
    }
    return total;
  }

  int max_width() const {
    int w = std::max(input_dim, output_dim);
    for (int h : hidden) w = std::max(w, h);
    return w;
  }
};

/// Flat parameter storage plus per-layer shape descriptors. Layout per layer:
/// row-major weights [out x in], then biases [out].
struct ParamVector {
  Vec flat;
  std::vector<std::array<int, 2>> layout;  // {in, out} per layer

  int size() const { return static_cast<int>(flat.size()); }
};

/// Fan-in scaled Gaussian weights, zero biases. Deterministic in the seed.
inline ParamVector init_params(const MlpSpec& spec, uint64_t seed) {
  spec.validate();
  ParamVector p;
  p.flat.reserve(spec.param_count());
  Rng rng(seed);
  for (int l = 0; l < spec.num_layers(); ++l) {
    auto [in, out] = spec.layer_dims(l);
    p.layout.push_back({in, out});
    double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (int i = 0; i < in * out; ++i) p.flat.push_back(scale * rng.normal());
    for (int i = 0; i < out; ++i) p.flat.push_back(0.0);
  }
  return p;
}

namespace detail {

template <class S>
S apply_act(Act act, const S& x) {
  using std::tanh;
  switch (act) {
    case Act::Tanh: return tanh(x);
    case Act::Softplus: return softplus(x);
    case Act::Relu: return relu(x);
  }
  return x;
}

template <class S>
ad::Dual<S> apply_act(Act act, const ad::Dual<S>& x) {
  switch (act) {
    case Act::Tanh: return tanh(x);
    case Act::Softplus: return softplus(x);
    case Act::Relu: return relu(x);
  }
  return x;
}

}  // namespace detail

/// Scratch buffers reused across forward passes to avoid reallocation.
template <class X>
struct MlpWork {
  std::vector<X> a, b;
};

/// Forward pass generic over the scalar type: S = double for inference,
/// S = ad::Var while recording a training step. `params` must be the flat
/// layout produced by init_params.
template <class S, class X>
void mlp_forward(const MlpSpec& spec, const S* params, std::span<const X> x, X* out,
                 MlpWork<X>& work) {
  if (static_cast<int>(x.size()) != spec.input_dim)
    throw DataError("mlp_forward: input dimension mismatch");
  work.a.assign(x.begin(), x.end());
  std::vector<X>* cur = &work.a;
  std::vector<X>* nxt = &work.b;
  int offset = 0;
  int n_layers = spec.num_layers();
  for (int l = 0; l < n_layers; ++l) {
    auto [in, out_dim] = spec.layer_dims(l);
    nxt->clear();
    nxt->reserve(out_dim);
    const S* w = params + offset;
    const S* bias = params + offset + in * out_dim;
    for (int u = 0; u < out_dim; ++u) {
      X acc = (*cur)[0] * w[u * in];
      for (int j = 1; j < in; ++j) acc = ad::muladd((*cur)[j], w[u * in + j], acc);
      acc = acc + bias[u];
      if (l != n_layers - 1) acc = detail::apply_act(spec.act, acc);
      nxt->push_back(acc);
    }
    std::swap(cur, nxt);
    offset += in * out_dim + out_dim;
  }
  for (int i = 0; i < spec.output_dim; ++i) out[i] = (*cur)[i];
}

inline Vec mlp_forward(const MlpSpec& spec, const ParamVector& params, std::span<const double> x) {
  if (params.size() != spec.param_count()) throw DataError("mlp_forward: parameter count mismatch");
  Vec out(spec.output_dim);
  MlpWork<double> work;
  mlp_forward<double, double>(spec, params.flat.data(), x, out.data(), work);
  return out;
}

// Dual<S> inputs against tangent-free S parameters; primal and tangent are
// carried together so the result stays differentiable when S = ad::Var.
template <class S>
void mlp_forward_dual(const MlpSpec& spec, const S* params, std::span<const ad::Dual<S>> x,
                      ad::Dual<S>* out, MlpWork<ad::Dual<S>>& work) {
  if (static_cast<int>(x.size()) != spec.input_dim)
    throw DataError("mlp_forward_dual: input dimension mismatch");
  work.a.assign(x.begin(), x.end());
  auto* cur = &work.a;
  auto* nxt = &work.b;
  int offset = 0;
  int n_layers = spec.num_layers();
  for (int l = 0; l < n_layers; ++l) {
    auto [in, out_dim] = spec.layer_dims(l);
    nxt->clear();
    nxt->reserve(out_dim);
    const S* w = params + offset;
    const S* bias = params + offset + in * out_dim;
    for (int u = 0; u < out_dim; ++u) {
      ad::Dual<S> acc = (*cur)[0] * w[u * in];
      for (int j = 1; j < in; ++j) acc = ad::muladd((*cur)[j], w[u * in + j], acc);
      acc = acc + bias[u];
      if (l != n_layers - 1) acc = detail::apply_act(spec.act, acc);
      nxt->push_back(acc);
    }
    std::swap(cur, nxt);
    offset += in * out_dim + out_dim;
  }
  for (int i = 0; i < spec.output_dim; ++i) out[i] = (*cur)[i];
}

/// Exact network Jacobian d(output)/d(input) via one forward-mode pass per
/// input dimension. With S = ad::Var the entries remain differentiable with
/// respect to the parameters.
template <class S>
Mat<S> mlp_jacobian_wrt_input(const MlpSpec& spec, const S* params, std::span<const S> x) {
  Mat<S> jac(spec.output_dim, spec.input_dim);
  std::vector<ad::Dual<S>> xd(spec.input_dim);
  std::vector<ad::Dual<S>> yd(spec.output_dim, ad::Dual<S>{ad::lift(x[0], 0.0), ad::lift(x[0], 0.0)});
  MlpWork<ad::Dual<S>> work;
  for (int k = 0; k < spec.input_dim; ++k) {
    for (int j = 0; j < spec.input_dim; ++j)
      xd[j] = ad::Dual<S>{x[j], ad::lift(x[j], j == k ? 1.0 : 0.0)};
    mlp_forward_dual<S>(spec, params, std::span<const ad::Dual<S>>(xd), yd.data(), work);
    for (int i = 0; i < spec.output_dim; ++i) jac(i, k) = yd[i].d;
  }
  return jac;
}

inline Matd jacobian_wrt_input(const MlpSpec& spec, const ParamVector& params,
                               std::span<const double> x) {
  if (params.size() != spec.param_count())
    throw DataError("jacobian_wrt_input: parameter count mismatch");
  if (static_cast<int>(x.size()) != spec.input_dim)
    throw DataError("jacobian_wrt_input: input dimension mismatch");
  return mlp_jacobian_wrt_input<double>(spec, params.flat.data(), x);
}

}  // namespace stride
