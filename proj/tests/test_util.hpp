// Shared test oracles. Everything here is deliberately independent of the
// library's differentiation path: plain finite differences, brute-force
// statistics, and closed-form references.
#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

namespace stride::testutil {

using RealFn = std::function<double(std::span<const double>)>;

/// Central finite differences, step h per coordinate.
inline std::vector<double> finite_diff_grad(const RealFn& f, std::vector<double> x,
                                            double h = 1e-6) {
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    double orig = x[i];
    x[i] = orig + h;
    double fp = f(x);
    x[i] = orig - h;
    double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

using VecFn = std::function<std::vector<double>(std::span<const double>)>;

/// Central finite-difference Jacobian, row-major m x n.
inline std::vector<double> finite_diff_jacobian(const VecFn& f, std::vector<double> x, int m,
                                                double h = 1e-5) {
  int n = static_cast<int>(x.size());
  std::vector<double> jac(static_cast<size_t>(m) * n);
  for (int k = 0; k < n; ++k) {
    double orig = x[k];
    x[k] = orig + h;
    std::vector<double> fp = f(x);
    x[k] = orig - h;
    std::vector<double> fm = f(x);
    x[k] = orig;
    for (int i = 0; i < m; ++i) jac[static_cast<size_t>(i) * n + k] = (fp[i] - fm[i]) / (2.0 * h);
  }
  return jac;
}

/// Relative error with an absolute floor, so tiny values compare sanely.
inline double rel_err(double a, double b, double floor = 1e-9) {
  double num = std::abs(a - b);
  double den = std::abs(a) + std::abs(b) + floor;
  return num / den;
}

/// Empirical 1-Wasserstein distance between two equally sized 1-D samples.
inline double wasserstein1(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

}  // namespace stride::testutil
