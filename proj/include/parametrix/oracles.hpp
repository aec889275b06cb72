#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "parametrix/chain.hpp"
#include "parametrix/coefficients.hpp"
#include "parametrix/gaussian.hpp"
#include "parametrix/series.hpp"

namespace parametrix {

enum class Provenance { ParametrixSde, ParametrixChain, MonteCarlo, GridCK };

std::string provenance_name(Provenance p);

/// Density values over (elapsed, start, end) axes, stored with the end index fastest.
struct DensityGrid {
  std::vector<double> elapsed;
  std::vector<Point> starts;
  std::vector<Point> ends;
  std::vector<double> values;
  std::vector<double> std_errors;  // Monte Carlo only
  Provenance provenance = Provenance::ParametrixSde;
  std::string scheme;
  std::optional<std::uint64_t> seed;
  double bandwidth = 0.0;
  bool bandwidth_warning = false;

  std::size_t index(std::size_t e, std::size_t s, std::size_t y) const {
    return (e * starts.size() + s) * ends.size() + y;
  }
  double value(std::size_t e, std::size_t s, std::size_t y) const { return values[index(e, s, y)]; }

  /// Throws InvalidArgument unless every axis is strictly increasing (lexicographically for
  /// points), the value count matches and every value is >= -1e-12.
  void validate() const;
};

/// Silverman's rule of thumb scaled by 0.8, per axis: 0.8 * 1.06 sd n^{-1/5}.
double silverman_bandwidth(const std::vector<double>& samples);

struct McOptions {
  std::size_t n_paths = 100000;
  std::optional<double> bandwidth;  // none: Silverman x 0.8 (spread of the first batch, pooled size)
  std::uint64_t seed = 1;
  int threads = 1;
  int euler_steps = 200;  // diffusion only
};

/// Euler paths of the diffusion with step (t - s) / euler_steps; Gaussian kernel density estimate
/// at the end points; standard errors by 20 batch means. Batch b draws from a generator seeded by
/// splitmix64(seed + b), so results depend on the seed only.
DensityGrid mc_density(const CoefficientSet& set, double s, double t, const Point& x,
                       const std::vector<Point>& ends, const McOptions& options);

/// Same for the chain between steps i and j, with its own innovations.
DensityGrid mc_density(const ChainModel& model, int i, int j, const Point& x, const std::vector<Point>& ends,
                       const McOptions& options);

/// p_{k+1}(y) = int p_k(z) pi^h(t_k, z, y) dz on the grid nodes, trapezoid in z, starting from
/// p_{i+1} = pi^h(t_i, x, .). Throws RefinementRequired when the mass moves by more than 1e-3 in a
/// step or the first step has mass off by more than 1e-3.
DensityGrid grid_chapman_kolmogorov(const ChainModel& model, int i, int j, const Point& x, const SpatialGrid& grid,
                                    int threads = 1);

/// Lattice for the grid oracle: x +- (8 sqrt(Lambda elapsed) + K1 elapsed), at least 513 nodes (d = 1)
/// and spacing at most sqrt(h / Lambda) / 2.
SpatialGrid ck_grid(const ChainModel& model, int i, int j, const Point& x);

/// Weight c^d elapsed^{-d/2} Q_r(c |z| / sqrt(elapsed)).
struct ProfileWeight {
  double r = 0.0;
  double c = 1.0;
};

using DensityWeight = std::variant<GaussianRef, ProfileWeight>;

double weight_value(const DensityWeight& w, int dim, double elapsed, const Point& disp);

struct Comparison {
  double sup_gap = 0.0;
  double elapsed = 0.0;
  Point start;
  Point end;
  std::size_t compared = 0;
};

/// sup |a - b| / weight over points with |y - x| <= 6 sqrt(elapsed). Throws InvalidArgument when
/// the axes differ.
Comparison compare_densities(const DensityGrid& a, const DensityGrid& b, const DensityWeight& weight);

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  double residual = 0.0;  // root mean square of the log residuals
  std::size_t used = 0;
  std::vector<std::string> warnings;
};

/// Least squares of log gap against log eps. Needs at least 3 epsilons spanning an octave;
/// nonpositive gaps are dropped with a warning, and fewer than 3 remaining throws InvalidArgument.
RateFit rate_fit(const std::vector<double>& epsilons, const std::vector<double>& gaps);

struct StabilityReport {
  std::vector<double> epsilons;
  std::vector<DeltaMetrics> delta;
  std::vector<double> delta_used;        // Delta entering the ratio
  std::vector<double> sup_weighted_gap;  // sup |p - p_eps| / chi_c
  std::vector<double> raw_gap;           // sup |p - p_eps|
  std::vector<double> ratio;             // gap / Delta
  RateFit fit;                           // log raw gap vs log eps
  double q = 0.0;
  double alpha_q = 0.5;

  double ratio_spread() const;
  double fitted_constant() const;  // max ratio
  bool ratios_finite() const;
};

struct SweepProbe {
  double s = 0.0;
  double t = 1.0;
  Point x;
  std::vector<Point> ends;
};

struct DeltaSetup {
  double q = std::numeric_limits<double>::infinity();
  std::vector<double> times{0.0};
  Box domain = Box::cube(1, -6.0, 6.0);
  DeltaOptions options;
};

/// Stability audit for diffusions: parametrix densities of family.at(eps) against family.base().
StabilityReport sde_stability_sweep(const PerturbationFamily& family, const std::vector<double>& epsilons,
                                    const SweepProbe& probe, int order, const ConvolutionScheme& scheme,
                                    const DeltaSetup& delta, int threads = 1);

/// Stability audit on chains: steps 0..N of the chain with the given law. The weight is p_c for
/// Gaussian innovations and the profile of order M - (d + 5 + gamma) for polynomial tails.
StabilityReport chain_stability_sweep(const PerturbationFamily& family, const std::vector<double>& epsilons,
                                      double T, int N, const InnovationLaw& law, const Point& x,
                                      const std::vector<Point>& ends, const DeltaSetup& delta, int threads = 1);

/// Payoffs of the catalog, as functions of the log price y: indicator-call 1{e^y > K} and
/// bounded-lipschitz min((e^y - K)^+, 1).
struct Payoff {
  std::string id;
  double strike = 1.0;
  double operator()(double y) const;
  static Payoff from_id(const std::string& id, double strike = 1.0);
  static std::vector<std::string> ids();
};

struct PriceSensitivity {
  double price_base = 0.0;
  double price_perturbed = 0.0;
  double difference = 0.0;
  double delta = 0.0;
  double reference_integral = 0.0;  // int |f(e^y)| p_c(T - t, y - x) dy
  double bound_side = 0.0;          // delta * reference_integral
  double ratio = 0.0;               // |difference| / bound_side (0 when both vanish)
};

/// Prices E f(exp(X_T)) for X_t = x under base and family.at(eps) (d = 1), by Simpson quadrature
/// against the parametrix densities. Throws EvaluationError when the truncated integrals have not
/// converged.
PriceSensitivity price_sensitivity(const PerturbationFamily& family, double eps, const Payoff& payoff, double t,
                                   double T, double x, int order, const ConvolutionScheme& scheme,
                                   const DeltaSetup& delta, int threads = 1);

/// Parametrix densities on a grid: one engine per (elapsed, start).
DensityGrid series_density_grid(const CoefficientSet& set, double s, const std::vector<double>& elapsed,
                                const std::vector<Point>& starts, const std::vector<Point>& ends, int order,
                                const ConvolutionScheme& scheme, int threads = 1);

/// Chain parametrix densities at steps 0 -> j for each j in `steps`.
DensityGrid chain_density_grid(const ChainModel& model, const std::vector<int>& steps,
                               const std::vector<Point>& starts, const std::vector<Point>& ends, int threads = 1);

/// Grid oracle at arbitrary end points: the lattice recursion of grid_chapman_kolmogorov up to step
/// j - 1 on ck_grid(model, 0, j, x) with its spacing halved, then one exact step
/// p_j(y) = sum_z w_z p_{j-1}(z) pi^h(t_{j-1}, z, y).
DensityGrid ck_density_grid(const ChainModel& model, const std::vector<int>& steps, const std::vector<Point>& starts,
                            const std::vector<Point>& ends, int threads = 1);

}  // namespace parametrix
