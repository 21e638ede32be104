#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stride {

using Vec = std::vector<double>;

/// Raised on malformed files, schema mismatches, or inconsistent inputs.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when a computation produces non-finite values or a solve breaks down.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Domain types shared by every learned model and environment.

/// Generalized coordinates and velocities of a mechanical system.
struct State {
  Vec q;     // rad or m
  Vec qdot;  // rad/s or m/s

  int dof() const { return static_cast<int>(q.size()); }
};

/// Generalized forces/torques applied by the controller.
struct ControlInput {
  Vec tau;  // N*m or N
};

/// Conditioning tuple (q, qdot, tau) fed to all learned models.
struct Context {
  State state;
  ControlInput control;

  int dof() const { return state.dof(); }
};

// ---------------------------------------------------------------------------
// Small dense matrix, row-major. Dimensions here never exceed a few dozen.

template <class T>
struct Mat {
  int rows = 0, cols = 0;
  std::vector<T> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c) {}
  Mat(int r, int c, T fill) : rows(r), cols(c), a(static_cast<size_t>(r) * c, fill) {}

  T& operator()(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
  const T& operator()(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }
};

using Matd = Mat<double>;

inline Matd identity(int n) {
  Matd m(n, n, 0.0);
  for (int i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(norm2(a)); }

inline bool all_finite(std::span<const double> a) {
  for (double v : a)
    if (!std::isfinite(v)) return false;
  return true;
}

inline double median(Vec v) {
  if (v.empty()) throw DataError("median of empty vector");
  std::sort(v.begin(), v.end());
  size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double stddev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  double mu = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(v.size()));
}

/// Wrap an angle into (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a + M_PI, 2.0 * M_PI);
  if (a <= 0.0) a += 2.0 * M_PI;
  return a - M_PI;
}

// Scalar activations; Var/Dual overloads live in autodiff.hpp.
inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double relu(double x) { return x > 0.0 ? x : 0.0; }

// ---------------------------------------------------------------------------
// Eigenvalues of small symmetric/general matrices, enough for SPD checks and
// planar equilibrium classification.

/// Eigenvalues of a symmetric matrix via cyclic Jacobi sweeps.
inline Vec symmetric_eigenvalues(Matd m) {
  if (m.rows != m.cols) throw DataError("symmetric_eigenvalues: matrix not square");
  int n = m.rows;
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += m(p, q) * m(p, q);
    if (off < 1e-30) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        if (std::abs(m(p, q)) < 1e-300) continue;
        double theta = (m(q, q) - m(p, p)) / (2.0 * m(p, q));
        double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (int k = 0; k < n; ++k) {
          double mkp = m(k, p), mkq = m(k, q);
          m(k, p) = c * mkp - s * mkq;
          m(k, q) = s * mkp + c * mkq;
        }
        for (int k = 0; k < n; ++k) {
          double mpk = m(p, k), mqk = m(q, k);
          m(p, k) = c * mpk - s * mqk;
          m(q, k) = s * mpk + c * mqk;
        }
      }
    }
  }
  Vec ev(n);
  for (int i = 0; i < n; ++i) ev[i] = m(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

/// Eigenvalue pair of a general 2x2 matrix (possibly complex conjugate).
inline std::array<std::complex<double>, 2> eigenvalues_2x2(const Matd& m) {
  if (m.rows != 2 || m.cols != 2) throw DataError("eigenvalues_2x2: need 2x2 matrix");
  double tr = m(0, 0) + m(1, 1);
  double det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
  double disc = tr * tr / 4.0 - det;
  if (disc >= 0.0) {
    double r = std::sqrt(disc);
    return {std::complex<double>(tr / 2.0 + r, 0.0), std::complex<double>(tr / 2.0 - r, 0.0)};
  }
  double r = std::sqrt(-disc);
  return {std::complex<double>(tr / 2.0, r), std::complex<double>(tr / 2.0, -r)};
}

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 core with explicit Box-Muller normals, so
// streams are bit-reproducible across platforms and standard libraries.

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via Box-Muller (cosine branch; two uniforms per draw).
  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  void fill_normal(std::span<double> out) {
    for (double& v : out) v = normal();
  }

  /// Uniform integer in [0, n).
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  /// Derive an independent stream; deterministic in (seed, k).
  Rng fork(uint64_t k) const {
    uint64_t z = state_ ^ (0x9E3779B97F4A7C15ULL * (k + 1));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    return Rng(z ^ (z >> 27));
  }

 private:
  uint64_t state_;
};

// ---------------------------------------------------------------------------
// FNV-1a hash, used for config digests embedded in evaluation reports.

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::string hex_digest(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

/// Shortest text form that parses back to the identical double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

}  // namespace stride
