#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "stride/common.hpp"

namespace stride::ad {

// Reverse-mode automatic differentiation over an append-only operation tape,
// plus forward-mode dual numbers that can nest over tape variables. The dual
// arithmetic decomposes into tape primitives, so input Jacobians computed by
// forward passes remain differentiable with respect to the parameters that
// produced them (reverse-over-forward).

enum class Op : uint8_t {
  Input,
  Const,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  AddC,   // x + c
  SubC,   // x - c
  RsubC,  // c - x
  MulC,   // x * c
  DivC,   // x / c
  RdivC,  // c / x
  Fma,    // a * b + c
  FmaC,   // a * const + c
  Sin,
  Cos,
  Tanh,
  Exp,
  Log,
  Sqrt,
  Softplus,
  Sigmoid,
  Relu,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Const: return "const";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::AddC: return "add_const";
    case Op::SubC: return "sub_const";
    case Op::RsubC: return "const_sub";
    case Op::MulC: return "mul_const";
    case Op::DivC: return "div_const";
    case Op::RdivC: return "const_div";
    case Op::Fma: return "fma";
    case Op::FmaC: return "fma_const";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Tanh: return "tanh";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sqrt: return "sqrt";
    case Op::Softplus: return "softplus";
    case Op::Sigmoid: return "sigmoid";
    case Op::Relu: return "relu";
  }
  return "?";
}

class Tape;

/// Handle to one node on a tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int32_t idx = -1;

  double val() const;
};

class Tape {
 public:
  struct Node {
    Op op;
    int32_t p0, p1;  // parent indices, -1 if unused
    int32_t p2;      // fused additive parent (partial is always 1), -1 if unused
    double aux;      // constant payload for *C ops
    double val;
    double d0, d1;   // local partials wrt p0/p1, fixed at record time
  };

  void reserve(size_t n) { nodes_.reserve(n); }
  void clear() { nodes_.clear(); }
  size_t size() const { return nodes_.size(); }

  /// Drop every node recorded after `mark`. Used to reuse shared leading
  /// nodes (parameter leaves) across per-datum graphs within a training step.
  void rewind(size_t mark) { nodes_.resize(mark); }

  Var input(double v) { return push(Op::Input, -1, -1, 0.0, v, 0.0, 0.0); }

  Var constant(double v) { return push(Op::Const, -1, -1, v, v, 0.0, 0.0); }

  std::vector<Var> inputs(std::span<const double> xs) {
    std::vector<Var> vs(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) vs[i] = input(xs[i]);
    return vs;
  }

  double val(int32_t i) const { return nodes_[i].val; }

  Var push(Op op, int32_t p0, int32_t p1, double aux, double val, double d0, double d1,
           int32_t p2 = -1) {
    if (!std::isfinite(val)) {
      throw NumericalError("non-finite value at tape node " + std::to_string(nodes_.size()) +
                           " (" + op_name(op) + ")");
    }
    nodes_.push_back(Node{op, p0, p1, p2, aux, val, d0, d1});
    return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
  }

  /// Accumulate d(output)/d(node) for every node into `adj` (resized/zeroed).
  void backward(Var output, std::vector<double>& adj) const {
    adj.assign(nodes_.size(), 0.0);
    adj[output.idx] = 1.0;
    for (int32_t i = output.idx; i >= 0; --i) {
      double a = adj[i];
      if (a == 0.0) continue;
      const Node& nd = nodes_[i];
      if (nd.p0 >= 0) adj[nd.p0] += nd.d0 * a;
      if (nd.p1 >= 0) adj[nd.p1] += nd.d1 * a;
      if (nd.p2 >= 0) adj[nd.p2] += a;
    }
  }

  /// Recompute every node value from its recorded operation. For identical
  /// leaf values this reproduces the recorded values bit-exactly.
  Vec replay() const {
    Vec v(nodes_.size());
    for (size_t i = 0; i < nodes_.size(); ++i) {
      const Node& nd = nodes_[i];
      double a = nd.p0 >= 0 ? v[nd.p0] : 0.0;
      double b = nd.p1 >= 0 ? v[nd.p1] : 0.0;
      switch (nd.op) {
        case Op::Input: v[i] = nd.val; break;
        case Op::Const: v[i] = nd.aux; break;
        case Op::Add: v[i] = a + b; break;
        case Op::Sub: v[i] = a - b; break;
        case Op::Mul: v[i] = a * b; break;
        case Op::Div: v[i] = a / b; break;
        case Op::Neg: v[i] = -a; break;
        case Op::AddC: v[i] = a + nd.aux; break;
        case Op::SubC: v[i] = a - nd.aux; break;
        case Op::RsubC: v[i] = nd.aux - a; break;
        case Op::MulC: v[i] = a * nd.aux; break;
        case Op::DivC: v[i] = a / nd.aux; break;
        case Op::RdivC: v[i] = nd.aux / a; break;
        case Op::Fma: v[i] = a * b + v[nd.p2]; break;
        case Op::FmaC: v[i] = a * nd.aux + v[nd.p2]; break;
        case Op::Sin: v[i] = std::sin(a); break;
        case Op::Cos: v[i] = std::cos(a); break;
        case Op::Tanh: v[i] = std::tanh(a); break;
        case Op::Exp: v[i] = std::exp(a); break;
        case Op::Log: v[i] = std::log(a); break;
        case Op::Sqrt: v[i] = std::sqrt(a); break;
        case Op::Softplus: v[i] = stride::softplus(a); break;
        case Op::Sigmoid: v[i] = stride::sigmoid(a); break;
        case Op::Relu: v[i] = stride::relu(a); break;
      }
    }
    return v;
  }

  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  std::vector<Node> nodes_;
};

inline double Var::val() const { return tape->val(idx); }

// --- binary operators -------------------------------------------------------

inline Var operator+(Var a, Var b) {
  return a.tape->push(Op::Add, a.idx, b.idx, 0.0, a.val() + b.val(), 1.0, 1.0);
}
inline Var operator-(Var a, Var b) {
  return a.tape->push(Op::Sub, a.idx, b.idx, 0.0, a.val() - b.val(), 1.0, -1.0);
}
inline Var operator*(Var a, Var b) {
  return a.tape->push(Op::Mul, a.idx, b.idx, 0.0, a.val() * b.val(), b.val(), a.val());
}
inline Var operator/(Var a, Var b) {
  double bv = b.val();
  double v = a.val() / bv;
  return a.tape->push(Op::Div, a.idx, b.idx, 0.0, v, 1.0 / bv, -v / bv);
}
inline Var operator-(Var a) { return a.tape->push(Op::Neg, a.idx, -1, 0.0, -a.val(), -1.0, 0.0); }

inline Var operator+(Var a, double c) {
  return a.tape->push(Op::AddC, a.idx, -1, c, a.val() + c, 1.0, 0.0);
}
inline Var operator+(double c, Var a) { return a + c; }
inline Var operator-(Var a, double c) {
  return a.tape->push(Op::SubC, a.idx, -1, c, a.val() - c, 1.0, 0.0);
}
inline Var operator-(double c, Var a) {
  return a.tape->push(Op::RsubC, a.idx, -1, c, c - a.val(), -1.0, 0.0);
}
inline Var operator*(Var a, double c) {
  return a.tape->push(Op::MulC, a.idx, -1, c, a.val() * c, c, 0.0);
}
inline Var operator*(double c, Var a) { return a * c; }
inline Var operator/(Var a, double c) {
  return a.tape->push(Op::DivC, a.idx, -1, c, a.val() / c, 1.0 / c, 0.0);
}
inline Var operator/(double c, Var a) {
  double av = a.val();
  return a.tape->push(Op::RdivC, a.idx, -1, c, c / av, -c / (av * av), 0.0);
}

inline Var& operator+=(Var& a, Var b) { return a = a + b; }
inline Var& operator-=(Var& a, Var b) { return a = a - b; }
inline Var& operator*=(Var& a, Var b) { return a = a * b; }

// --- unary functions --------------------------------------------------------

inline Var sin(Var a) {
  return a.tape->push(Op::Sin, a.idx, -1, 0.0, std::sin(a.val()), std::cos(a.val()), 0.0);
}
inline Var cos(Var a) {
  return a.tape->push(Op::Cos, a.idx, -1, 0.0, std::cos(a.val()), -std::sin(a.val()), 0.0);
}
inline Var tanh(Var a) {
  double t = std::tanh(a.val());
  return a.tape->push(Op::Tanh, a.idx, -1, 0.0, t, 1.0 - t * t, 0.0);
}
inline Var exp(Var a) {
  double e = std::exp(a.val());
  return a.tape->push(Op::Exp, a.idx, -1, 0.0, e, e, 0.0);
}
inline Var log(Var a) {
  return a.tape->push(Op::Log, a.idx, -1, 0.0, std::log(a.val()), 1.0 / a.val(), 0.0);
}
inline Var sqrt(Var a) {
  double s = std::sqrt(a.val());
  return a.tape->push(Op::Sqrt, a.idx, -1, 0.0, s, 0.5 / s, 0.0);
}
inline Var softplus(Var a) {
  // exact derivative sigma(x); keeps gradients smooth through the kink region
  return a.tape->push(Op::Softplus, a.idx, -1, 0.0, stride::softplus(a.val()),
                      stride::sigmoid(a.val()), 0.0);
}
inline Var sigmoid(Var a) {
  double s = stride::sigmoid(a.val());
  return a.tape->push(Op::Sigmoid, a.idx, -1, 0.0, s, s * (1.0 - s), 0.0);
}
inline Var relu(Var a) {
  double v = a.val();
  return a.tape->push(Op::Relu, a.idx, -1, 0.0, v > 0.0 ? v : 0.0, v > 0.0 ? 1.0 : 0.0, 0.0);
}

// --- fused multiply-add ------------------------------------------------------
// muladd(x, w, acc) == x * w + acc recorded as one node; this is the inner
// operation of every affine layer and dominates tape size.

inline double muladd(double x, double w, double acc) { return x * w + acc; }
inline Var muladd(Var x, Var w, Var acc) {
  return x.tape->push(Op::Fma, x.idx, w.idx, 0.0, x.val() * w.val() + acc.val(), w.val(), x.val(),
                      acc.idx);
}
inline Var muladd(Var x, double w, Var acc) {
  return x.tape->push(Op::FmaC, x.idx, -1, w, x.val() * w + acc.val(), w, 0.0, acc.idx);
}

// --- generic scalar helpers --------------------------------------------------

inline double value_of(double x) { return x; }
inline double value_of(Var x) { return x.val(); }

/// Materialize the constant c with the same scalar type as `like`.
inline double lift(double /*like*/, double c) { return c; }
inline Var lift(Var like, double c) { return like.tape->constant(c); }

// ---------------------------------------------------------------------------
// Forward-mode dual numbers. T is double for plain derivatives or Var when the
// tangent itself must stay differentiable (reverse-over-forward).

template <class T>
struct Dual {
  T v;  // primal
  T d;  // tangent
};

template <class T>
Dual<T> operator+(const Dual<T>& a, const Dual<T>& b) {
  return {a.v + b.v, a.d + b.d};
}
template <class T>
Dual<T> operator-(const Dual<T>& a, const Dual<T>& b) {
  return {a.v - b.v, a.d - b.d};
}
template <class T>
Dual<T> operator*(const Dual<T>& a, const Dual<T>& b) {
  return {a.v * b.v, a.v * b.d + a.d * b.v};
}
template <class T>
Dual<T> operator/(const Dual<T>& a, const Dual<T>& b) {
  T q = a.v / b.v;
  return {q, (a.d - q * b.d) / b.v};
}
template <class T>
Dual<T> operator-(const Dual<T>& a) {
  return {-a.v, -a.d};
}

// mixed ops treating the plain scalar as tangent-free
template <class T>
Dual<T> operator*(const Dual<T>& a, const T& s) {
  return {a.v * s, a.d * s};
}
template <class T>
Dual<T> operator*(const T& s, const Dual<T>& a) {
  return a * s;
}
template <class T>
Dual<T> operator+(const Dual<T>& a, const T& s) {
  return {a.v + s, a.d};
}
template <class T>
Dual<T> operator+(const T& s, const Dual<T>& a) {
  return a + s;
}
template <class T>
  requires(!std::is_same_v<T, double>)
Dual<T> operator*(const Dual<T>& a, double s) {
  return {a.v * s, a.d * s};
}
template <class T>
  requires(!std::is_same_v<T, double>)
Dual<T> operator*(double s, const Dual<T>& a) {
  return a * s;
}
template <class T>
  requires(!std::is_same_v<T, double>)
Dual<T> operator+(const Dual<T>& a, double s) {
  return {a.v + s, a.d};
}
template <class T>
  requires(!std::is_same_v<T, double>)
Dual<T> operator-(const Dual<T>& a, double s) {
  return {a.v - s, a.d};
}
template <class T>
  requires(!std::is_same_v<T, double>)
Dual<T> operator/(const Dual<T>& a, double s) {
  return {a.v / s, a.d / s};
}

template <class T>
Dual<T> sin(const Dual<T>& a) {
  using std::cos;
  using std::sin;
  return {sin(a.v), cos(a.v) * a.d};
}
template <class T>
Dual<T> cos(const Dual<T>& a) {
  using std::cos;
  using std::sin;
  return {cos(a.v), -(sin(a.v) * a.d)};
}
template <class T>
Dual<T> tanh(const Dual<T>& a) {
  using std::tanh;
  T t = tanh(a.v);
  return {t, (1.0 - t * t) * a.d};
}
template <class T>
Dual<T> exp(const Dual<T>& a) {
  using std::exp;
  T e = exp(a.v);
  return {e, e * a.d};
}
template <class T>
Dual<T> log(const Dual<T>& a) {
  using std::log;
  return {log(a.v), a.d / a.v};
}
template <class T>
Dual<T> sqrt(const Dual<T>& a) {
  using std::sqrt;
  T s = sqrt(a.v);
  return {s, a.d / (2.0 * s)};
}
template <class T>
Dual<T> softplus(const Dual<T>& a) {
  using stride::sigmoid;
  using stride::softplus;
  return {softplus(a.v), sigmoid(a.v) * a.d};
}
template <class T>
Dual<T> sigmoid(const Dual<T>& a) {
  using stride::sigmoid;
  T s = sigmoid(a.v);
  return {s, s * (1.0 - s) * a.d};
}
template <class T>
Dual<T> relu(const Dual<T>& a) {
  bool on = value_of(a.v) > 0.0;
  return {on ? a.v : lift(a.v, 0.0), on ? a.d : lift(a.v, 0.0)};
}

template <class T>
Dual<T> make_dual(const T& v, const T& d) {
  return {v, d};
}

/// x * w + acc with a tangent-free multiplier.
template <class T>
Dual<T> muladd(const Dual<T>& x, const T& w, const Dual<T>& acc) {
  return {muladd(x.v, w, acc.v), muladd(x.d, w, acc.d)};
}

// ---------------------------------------------------------------------------
// Functional drivers.

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Gradient of a scalar function at x via one reverse sweep.
inline Vec gradient(const ScalarFn& f, std::span<const double> x) {
  Tape tape;
  std::vector<Var> xs = tape.inputs(x);
  Var y = f(tape, xs);
  std::vector<double> adj;
  tape.backward(y, adj);
  Vec g(x.size());
  for (size_t i = 0; i < x.size(); ++i) g[i] = adj[xs[i].idx];
  return g;
}

/// Loss value and d(loss)/d(params), including parameters that are reached
/// only through input-Jacobian (dual-over-tape) paths.
inline std::pair<double, Vec> value_and_grad(const ScalarFn& f, std::span<const double> params) {
  Tape tape;
  std::vector<Var> ps = tape.inputs(params);
  Var y = f(tape, ps);
  double val = y.val();
  if (!std::isfinite(val)) throw NumericalError("non-finite loss value");
  std::vector<double> adj;
  tape.backward(y, adj);
  Vec g(params.size());
  for (size_t i = 0; i < params.size(); ++i) g[i] = adj[ps[i].idx];
  return {val, std::move(g)};
}

/// Jacobian dy/dx of a generic vector function via one forward-mode pass per
/// input dimension. F maps std::span<const Dual<S>> -> std::vector<Dual<S>>.
template <class S, class F>
Mat<S> jacobian_wrt_input(F&& f, std::span<const S> x, int out_dim) {
  int n = static_cast<int>(x.size());
  if (n < 1 || out_dim < 1) throw DataError("jacobian_wrt_input: empty input or output");
  Mat<S> jac(out_dim, n);
  std::vector<Dual<S>> xd(n);
  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < n; ++j) xd[j] = Dual<S>{x[j], lift(x[j], j == k ? 1.0 : 0.0)};
    std::vector<Dual<S>> y = f(std::span<const Dual<S>>(xd));
    if (static_cast<int>(y.size()) != out_dim)
      throw DataError("jacobian_wrt_input: output dimension mismatch");
    for (int i = 0; i < out_dim; ++i) jac(i, k) = y[i].d;
  }
  return jac;
}

}  // namespace stride::ad
