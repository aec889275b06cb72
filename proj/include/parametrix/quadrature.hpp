#pragma once

#include <span>
#include <vector>

namespace parametrix {

/// Nodes and weights of a one-dimensional rule.
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;

  std::size_t size() const noexcept { return nodes.size(); }
  double sum_weights() const;
};

/// Gauss-Legendre rule on [-1, 1] (Golub-Welsch).
const QuadratureRule& gauss_legendre(int n);

/// Gauss-Legendre rule mapped to [a, b].
QuadratureRule gauss_legendre(int n, double a, double b);

/// Gauss-Hermite rule for the standard normal law: sum w_i f(x_i) ~ E f(xi), xi ~ N(0,1).
const QuadratureRule& gauss_hermite_normal(int n);

/// Composite Simpson on [a, b] with an even number of intervals.
QuadratureRule simpson(int intervals, double a, double b);

/// Composite trapezoid on [a, b] with `nodes` equally spaced points.
QuadratureRule trapezoid(int nodes, double a, double b);

/// Composite midpoint on [a, b] with `cells` equal cells.
QuadratureRule midpoint(int cells, double a, double b);

/// Lagrange basis values l_j(x) for the given (distinct) nodes.
void lagrange_weights(std::span<const double> nodes, double x, std::span<double> out);

/// Uniform grid on [lo, hi] with n >= 2 points; endpoints are exact.
std::vector<double> linspace(double lo, double hi, int n);

/// Four-point Lagrange interpolation of uniformly sampled data; zero outside the sampled range.
double cubic_interp_uniform(std::span<const double> values, double lo, double step, double x);

/// Bicubic (tensor four-point Lagrange) interpolation on an n x n uniform grid stored row-major
/// with index i0 * n + i1; zero outside.
double bicubic_interp_uniform(std::span<const double> values, int n, double lo, double step,
                              double x0, double x1);

}  // namespace parametrix
