#include "parametrix/quadrature.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>

#include "parametrix/error.hpp"

namespace parametrix {

namespace {

// Golub-Welsch: nodes are eigenvalues of the Jacobi matrix, weights mu0 * v0^2.
QuadratureRule golub_welsch(const Eigen::VectorXd& off_diagonal, int n, double mu0) {
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int k = 0; k + 1 < n; ++k) {
    jacobi(k, k + 1) = off_diagonal(k);
    jacobi(k + 1, k) = off_diagonal(k);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(jacobi);
  QuadratureRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    rule.nodes[i] = solver.eigenvalues()(i);
    const double v0 = solver.eigenvectors()(0, i);
    rule.weights[i] = mu0 * v0 * v0;
  }
  // Symmetrise: both families are symmetric about 0.
  for (int i = 0; i < n / 2; ++i) {
    const int j = n - 1 - i;
    const double x = 0.5 * (rule.nodes[j] - rule.nodes[i]);
    const double w = 0.5 * (rule.weights[i] + rule.weights[j]);
    rule.nodes[i] = -x;
    rule.nodes[j] = x;
    rule.weights[i] = rule.weights[j] = w;
  }
  if (n % 2 == 1) rule.nodes[n / 2] = 0.0;
  return rule;
}

template <typename Builder>
const QuadratureRule& cached(std::map<int, QuadratureRule>& cache, std::mutex& mu, int n,
                             Builder build) {
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, build(n)).first;
  return it->second;
}

}  // namespace

double QuadratureRule::sum_weights() const {
  return std::accumulate(weights.begin(), weights.end(), 0.0);
}

const QuadratureRule& gauss_legendre(int n) {
  if (n < 1) throw InvalidArgument("gauss_legendre: n must be positive");
  static std::map<int, QuadratureRule> cache;
  static std::mutex mu;
  return cached(cache, mu, n, [](int m) {
    Eigen::VectorXd off(std::max(m - 1, 0));
    for (int k = 1; k < m; ++k) off(k - 1) = k / std::sqrt(4.0 * k * k - 1.0);
    return golub_welsch(off, m, 2.0);
  });
}

QuadratureRule gauss_legendre(int n, double a, double b) {
  const auto& ref = gauss_legendre(n);
  QuadratureRule rule = ref;
  const double half = 0.5 * (b - a);
  const double mid = 0.5 * (a + b);
  for (std::size_t i = 0; i < rule.size(); ++i) {
    rule.nodes[i] = mid + half * ref.nodes[i];
    rule.weights[i] = half * ref.weights[i];
  }
  return rule;
}

const QuadratureRule& gauss_hermite_normal(int n) {
  if (n < 1) throw InvalidArgument("gauss_hermite_normal: n must be positive");
  static std::map<int, QuadratureRule> cache;
  static std::mutex mu;
  return cached(cache, mu, n, [](int m) {
    // Probabilists' Hermite recurrence: off-diagonal sqrt(k), total mass 1.
    Eigen::VectorXd off(std::max(m - 1, 0));
    for (int k = 1; k < m; ++k) off(k - 1) = std::sqrt(static_cast<double>(k));
    return golub_welsch(off, m, 1.0);
  });
}

QuadratureRule simpson(int intervals, double a, double b) {
  if (intervals < 2 || intervals % 2 != 0)
    throw InvalidArgument("simpson: interval count must be even and >= 2");
  QuadratureRule rule;
  rule.nodes = linspace(a, b, intervals + 1);
  rule.weights.assign(intervals + 1, 0.0);
  const double h = (b - a) / intervals;
  for (int i = 0; i <= intervals; ++i) {
    double w = (i == 0 || i == intervals) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    rule.weights[i] = w * h / 3.0;
  }
  return rule;
}

QuadratureRule trapezoid(int nodes, double a, double b) {
  if (nodes < 2) throw InvalidArgument("trapezoid: need at least two nodes");
  QuadratureRule rule;
  rule.nodes = linspace(a, b, nodes);
  const double h = (b - a) / (nodes - 1);
  rule.weights.assign(nodes, h);
  rule.weights.front() = rule.weights.back() = 0.5 * h;
  return rule;
}

QuadratureRule midpoint(int cells, double a, double b) {
  if (cells < 1) throw InvalidArgument("midpoint: need at least one cell");
  QuadratureRule rule;
  const double h = (b - a) / cells;
  rule.nodes.resize(cells);
  rule.weights.assign(cells, h);
  for (int i = 0; i < cells; ++i) rule.nodes[i] = a + (i + 0.5) * h;
  return rule;
}

void lagrange_weights(std::span<const double> nodes, double x, std::span<double> out) {
  const std::size_t n = nodes.size();
  for (std::size_t j = 0; j < n; ++j) {
    double l = 1.0;
    for (std::size_t m = 0; m < n; ++m)
      if (m != j) l *= (x - nodes[m]) / (nodes[j] - nodes[m]);
    out[j] = l;
  }
}

std::vector<double> linspace(double lo, double hi, int n) {
  if (n < 2) throw InvalidArgument("linspace: need at least two points");
  std::vector<double> out(n);
  const double step = (hi - lo) / (n - 1);
  for (int i = 0; i < n; ++i) out[i] = lo + i * step;
  out.back() = hi;
  return out;
}

namespace {

// Stencil start and the four Lagrange weights at fractional offset.
inline bool cubic_stencil(int n, double lo, double step, double x, int& start, double w[4]) {
  const double pos = (x - lo) / step;
  if (!(pos >= 0.0) || pos > n - 1) return false;
  int i = static_cast<int>(std::floor(pos));
  start = std::clamp(i - 1, 0, std::max(n - 4, 0));
  const double f = pos - start;  // position relative to stencil node 0
  w[0] = -(f - 1.0) * (f - 2.0) * (f - 3.0) / 6.0;
  w[1] = f * (f - 2.0) * (f - 3.0) / 2.0;
  w[2] = -f * (f - 1.0) * (f - 3.0) / 2.0;
  w[3] = f * (f - 1.0) * (f - 2.0) / 6.0;
  return true;
}

}  // namespace

double cubic_interp_uniform(std::span<const double> values, double lo, double step, double x) {
  const int n = static_cast<int>(values.size());
  int s;
  double w[4];
  if (n < 4 || !cubic_stencil(n, lo, step, x, s, w)) return 0.0;
  return w[0] * values[s] + w[1] * values[s + 1] + w[2] * values[s + 2] + w[3] * values[s + 3];
}

double bicubic_interp_uniform(std::span<const double> values, int n, double lo, double step,
                              double x0, double x1) {
  int s0, s1;
  double w0[4], w1[4];
  if (n < 4 || !cubic_stencil(n, lo, step, x0, s0, w0) || !cubic_stencil(n, lo, step, x1, s1, w1))
    return 0.0;
  double acc = 0.0;
  for (int a = 0; a < 4; ++a) {
    const double* row = values.data() + static_cast<std::size_t>(s0 + a) * n + s1;
    acc += w0[a] * (w1[0] * row[0] + w1[1] * row[1] + w1[2] * row[2] + w1[3] * row[3]);
  }
  return acc;
}

}  // namespace parametrix
