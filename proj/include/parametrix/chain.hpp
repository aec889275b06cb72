#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "parametrix/coefficients.hpp"
#include "parametrix/quadrature.hpp"

namespace parametrix {

enum class InnovationKind { Gaussian, PolynomialTail };

/// Law of the i.i.d. chain innovations, standardised to mean 0 and identity covariance.
/// The polynomial-tail family is c (1 + |w|^2 / (M - 3))^{-M/2}: a Student law with M - 1 degrees
/// of freedom rescaled to unit variance, so f(w) <= C (1 + |w|)^{-M}.
class InnovationLaw {
 public:
  static InnovationLaw gaussian();
  static InnovationLaw polynomial_tail(double M);

  InnovationKind kind() const noexcept { return kind_; }
  double decay_order() const noexcept { return M_; }
  std::string name() const;

  /// One-dimensional standardised density.
  double density(double w) const;
  /// Density on R^d (product of standard normals; polynomial tails only in d = 1).
  double density(const Point& w) const;

  /// Rule with sum w_i phi(xi_i) ~ E phi(xi): 64-node Gauss-Hermite, or a 1025-node trapezoid
  /// against the density on [-40, 40] (weights renormalised to total mass 1).
  const QuadratureRule& expectation_rule() const { return *rule_; }

  static constexpr double kTailCut = 40.0;

 private:
  InnovationLaw(InnovationKind kind, double M);

  InnovationKind kind_;
  double M_ = 0.0;
  double norm_ = 0.0;
  std::shared_ptr<const QuadratureRule> rule_;
};

/// Densities of S_n = xi_1 + ... + xi_n for the polynomial-tail law on a common lattice.
struct SumTables {
  double step = 1.0 / 32.0;
  double range = 0.0;                      // lattice covers [-range, range]
  std::vector<std::vector<double>> table;  // table[n - 1][k], n = 1..N

  double density(int n, double s) const;
};

/// Euler chain Y_{k+1} = Y_k + b(t_k, Y_k) h + sqrt(h) sigma(t_k, Y_k) xi_{k+1}, t_k = k h.
class ChainModel {
 public:
  ChainModel(CoefficientSet set, double T, int N, InnovationLaw law);

  const CoefficientSet& set() const noexcept { return set_; }
  const InnovationLaw& law() const noexcept { return law_; }
  int dim() const noexcept { return set_.dim(); }
  double horizon() const noexcept { return T_; }
  int steps() const noexcept { return N_; }
  double h() const noexcept { return h_; }
  double time(int k) const { return k * h_; }

  /// Self-convolution tables (polynomial tails with time-homogeneous coefficients), else null.
  const SumTables* sum_tables() const { return tables_.get(); }

 private:
  CoefficientSet set_;
  double T_;
  int N_;
  double h_;
  InnovationLaw law_;
  std::shared_ptr<const SumTables> tables_;
};

/// f(sigma^-1 disp / sqrt h) / (|det sigma| h^{d/2}): density of sqrt(h) sigma xi at disp.
double step_density(const InnovationLaw& law, const Point& disp, const Matrix& sigma, double h);

/// pi^h(t_k, x, y) = f(sigma^-1 (y - x - b h) / sqrt h) / (|det sigma| h^{d/2}).
double one_step_density(const ChainModel& model, int k, const Point& x, const Point& y);

/// Same with drift removed and sigma taken at `freeze` (the frozen step).
double frozen_one_step_density(const ChainModel& model, int k, const Point& x, const Point& y,
                               const Point& freeze);

struct FrozenChainValue {
  double value = 0.0;
  bool dirac = false;  // i = j: the law is the point mass at x
};

/// Density of x + sqrt(h) sum_{k=i}^{j-1} sigma(t_k, freeze) xi_{k+1} at y (freeze defaults to y).
FrozenChainValue frozen_chain_density(const ChainModel& model, int i, int j, const Point& x, const Point& y,
                                      std::optional<Point> freeze = std::nullopt);

/// L^h_{t_k} phi(x) = h^-1 E[phi(Y_{t_{k+1}}) - phi(x)]; with `frozen_at` the step is driftless with
/// sigma(t_k, frozen_at).
double generator_apply(const ChainModel& model, int k, const std::function<double(const Point&)>& phi,
                       const Point& x, std::optional<Point> frozen_at = std::nullopt);

/// H^h(t_i, t_j, x, y) by innovation quadrature of the two generators.
double kernel_Hh(const ChainModel& model, int i, int j, const Point& x, const Point& y);

/// Tensor lattice used for the spatial integrals of the discrete convolution.
struct SpatialGrid {
  Point center;
  double halfwidth = 0.0;
  int nodes_per_axis = 0;

  double step() const { return 2.0 * halfwidth / (nodes_per_axis - 1); }
  int size() const;
  Point node(int flat) const;
  double cell() const;
};

/// Centered at x, halfwidth 8 sqrt(Lambda (t_j - t_i)) + K1 (t_j - t_i) (16 for polynomial tails),
/// spacing at most sqrt(h / Lambda) / 4 and at least 513 nodes per axis (d = 1).
SpatialGrid chain_grid(const ChainModel& model, int i, int j, const Point& x);

/// f(i, k, x, z) and g(k, j, z, y) in step indices.
using ChainKernel = std::function<double(int from_step, int to_step, const Point& from, const Point& to)>;

/// sum_{k=i}^{j-1} h int f(t_i, t_k, x, z) g(t_k, t_j, z, y) dz; the k = i term is h g(t_i, t_j, x, y).
double discrete_convolve(const ChainModel& model, const ChainKernel& f, const ChainKernel& g, int i, int j,
                         const Point& x, const Point& y, const SpatialGrid& grid);

struct ChainResult {
  double value = 0.0;
  std::vector<double> terms;  // r = 0..j-i
};

/// Finite parametrix sum of the chain for fixed (i, j, x); the intermediate terms are held on the
/// spatial grid, end points are evaluated directly.
class ChainEngine {
 public:
  ChainEngine(const ChainModel& model, int i, int j, const Point& x, const SpatialGrid& grid, int threads = 1);
  ChainEngine(const ChainModel& model, int i, int j, const Point& x, int threads = 1);

  ChainResult evaluate(const Point& y) const;
  std::vector<ChainResult> evaluate_many(const std::vector<Point>& ys) const;

  const SpatialGrid& grid() const noexcept { return grid_; }

 private:
  void build(int threads);
  double kernel(int k, int m, const Point& zp, const Point& z) const;
  double frozen(int k, const Point& z) const;

  ChainModel model_;
  int i_, j_;
  Point x_;
  SpatialGrid grid_;
  // terms_[m - i - 1][r][node] for m = i+1..j-1 and r = 0..m-i.
  std::vector<std::vector<std::vector<double>>> terms_;
};

ChainResult chain_density_parametrix(const ChainModel& model, int i, int j, const Point& x, const Point& y,
                                     const SpatialGrid& grid);

}  // namespace parametrix
