#pragma once

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "parametrix/linalg.hpp"

namespace parametrix {

using DriftField = std::function<Point(double t, const Point& x)>;
using DiffusionField = std::function<Matrix(double t, const Point& x)>;

/// A time-frozen field R^d -> matrices (vectors are d x 1, scalars 1 x 1). Norms are Frobenius.
using SpatialField = std::function<Matrix(const Point& x)>;

/// Declared constants of the boundedness, ellipticity and Hoelder assumptions.
struct AssumptionConstants {
  double K1 = 1.0;      // sup |b|
  double K2 = 1.0;      // sup |sigma|
  double Lambda = 1.0;  // eigenvalues of a in [1/Lambda, Lambda]
  double kappa = 1.0;   // Hoelder constant of sigma in space
};

/// Drift/diffusion pair with its regularity data. Immutable; evaluation is pure.
class CoefficientSet {
 public:
  CoefficientSet(int dim, DriftField drift, DiffusionField diffusion, double gamma,
                 AssumptionConstants constants, bool time_homogeneous = true,
                 std::string label = {});

  int dim() const noexcept { return dim_; }
  double gamma() const noexcept { return gamma_; }
  const AssumptionConstants& constants() const noexcept { return constants_; }
  bool time_homogeneous() const noexcept { return time_homogeneous_; }
  const std::string& label() const noexcept { return label_; }

  Point drift(double t, const Point& x) const { return drift_(t, x); }
  Matrix diffusion(double t, const Point& x) const { return diffusion_(t, x); }
  /// a = sigma sigma^T.
  Matrix a(double t, const Point& x) const;

  const DriftField& drift_field() const noexcept { return drift_; }
  const DiffusionField& diffusion_field() const noexcept { return diffusion_; }

  CoefficientSet with_constants(AssumptionConstants c) const;
  CoefficientSet with_label(std::string label) const;

 private:
  int dim_;
  DriftField drift_;
  DiffusionField diffusion_;
  double gamma_;
  AssumptionConstants constants_;
  bool time_homogeneous_;
  std::string label_;
};

/// Axis-aligned box in R^d.
struct Box {
  Point lo;
  Point hi;

  int dim() const { return static_cast<int>(lo.size()); }
  static Box cube(int dim, double lo, double hi);
  bool contains(const Point& p) const;
  double volume() const;
};

/// Deterministic pair-sampling plan for Hoelder quotients: all pairs of a coarse tensor grid, plus
/// near-diagonal pairs (p, p + delta_k e) for every point p of a fine tensor grid, every direction e
/// (axes, and the diagonal in d = 2) and the dyadic separations delta_k = base / 2^k.
struct PairSampler {
  int coarse_points_per_axis = 64;
  int fine_points_per_axis = 2001;
  int dyadic_levels = 10;
  double base_separation = 0.0;  // <= 0: an eighth of the smallest box side

  /// Superset plan: the fine grid gains the midpoints of its cells.
  PairSampler refined() const;
  static PairSampler for_dim(int dim);
};

/// Result of a sampled Hoelder quotient search.
struct HolderEstimate {
  double seminorm = 0.0;              // max quotient over every sampled pair
  std::vector<double> level_max;      // max quotient among near-diagonal pairs, per dyadic level
  std::size_t pair_count = 0;
  Point argmax_x;
  Point argmax_y;
};

HolderEstimate holder_profile(const SpatialField& f, double gamma, const Box& domain,
                              const PairSampler& sampler);

/// Certified lower bound of [f]_gamma on the domain: max over sampled pairs of
/// |f(x) - f(y)| / |x - y|^gamma.
double holder_seminorm(const SpatialField& f, double gamma, const Box& domain,
                       const PairSampler& sampler);

/// True when the near-diagonal quotients grow as the separation shrinks (a jump, or regularity
/// below gamma).
bool holder_blows_up(const HolderEstimate& est, double gamma);

/// Coefficient distance quantities of one (base, perturbed) pair.
struct DeltaMetrics {
  double delta_b_sup = 0.0;
  double delta_b_lq = 0.0;
  double q = std::numeric_limits<double>::infinity();
  double delta_sigma_sup = 0.0;
  double delta_sigma_seminorm = 0.0;
  double delta_sigma_holder = 0.0;  // sup + seminorm
  double delta_total = 0.0;         // delta_sigma_holder + (delta_b_lq, or delta_b_sup when q = inf)
  double alpha_q = 0.5;             // (1 - d/q) / 2
  bool lq_truncated = false;        // L^q integral restricted to the box with an unbounded tail
};

struct DeltaOptions {
  PairSampler sampler = PairSampler::for_dim(1);
  int sup_points_per_axis = 4001;
  int lq_cells_per_axis = 4000;
  /// Radius of a ball known to contain the support of b - b_eps (none: unknown).
  std::optional<double> drift_difference_support;
};

DeltaMetrics delta_metrics(const CoefficientSet& base, const CoefficientSet& perturbed, double q,
                           const std::vector<double>& time_grid, const Box& space_domain,
                           const DeltaOptions& options);

inline DeltaMetrics delta_metrics(const CoefficientSet& base, const CoefficientSet& perturbed,
                                  double q, const std::vector<double>& time_grid,
                                  const Box& space_domain) {
  DeltaOptions opts;
  opts.sampler = PairSampler::for_dim(base.dim());
  if (base.dim() == 2) {
    opts.sup_points_per_axis = 201;
    opts.lq_cells_per_axis = 400;
  }
  return delta_metrics(base, perturbed, q, time_grid, space_domain, opts);
}

/// Compactly supported, nonnegative, unit-mass mollifying profile on R (tensorised in d = 2).
class MollifierKernel {
 public:
  /// Throws InvalidArgument when the profile is negative at a node or its Simpson mass is not 1
  /// within 1e-8.
  MollifierKernel(std::string name, std::function<double(double)> profile, double support_lo,
                  double support_hi);

  static MollifierKernel triangular();
  /// C-infinity bump exp(-1/(1-w^2)) on [-1, 1], normalised with the mollification rule.
  static MollifierKernel smooth_bump();
  /// C-infinity bump supported on [0, 1]; first moment 1/2.
  static MollifierKernel one_sided_bump();

  const std::string& name() const noexcept { return name_; }
  double operator()(double w) const { return profile_(w); }
  double support_lo() const noexcept { return lo_; }
  double support_hi() const noexcept { return hi_; }
  double support_radius() const noexcept;

  /// Composite Simpson mass with the 64-interval mollification rule.
  double mass() const;

  static constexpr int kIntervals = 64;

 private:
  std::string name_;
  std::function<double(double)> profile_;
  double lo_;
  double hi_;
};

/// x -> integral f(t, x - eps w) rho(w) dw (Simpson, 64 intervals per axis over the support).
DriftField mollify(const DriftField& field, const MollifierKernel& rho, double eps, int dim);
DiffusionField mollify(const DiffusionField& field, const MollifierKernel& rho, double eps, int dim);

enum class PerturbationKind { VolatilityBump, Mollification, DriftShift };

/// Rule producing (b_eps, sigma_eps) from (b, sigma) for any eps >= 0.
class PerturbationFamily {
 public:
  /// sigma_eps = sigma + eps psi. psi_sup bounds |psi|.
  static PerturbationFamily volatility_bump(CoefficientSet base, DiffusionField psi, double psi_sup);
  /// b_eps = b * rho_eps, sigma_eps = sigma * rho_eps.
  static PerturbationFamily mollification(CoefficientSet base, MollifierKernel rho);
  /// b_eps = b + eps shift.
  static PerturbationFamily drift_shift(CoefficientSet base, DriftField shift, double shift_sup);

  PerturbationKind kind() const noexcept { return kind_; }
  const CoefficientSet& base() const noexcept { return base_; }

  /// The perturbed set. At eps = 0 the base coefficients are returned unchanged. The declared
  /// Lambda is widened to cover a sampled check of the perturbed a on `diagnostic_box`.
  CoefficientSet at(double eps) const;

  void set_diagnostic_box(Box box) { diagnostic_box_ = std::move(box); }

 private:
  PerturbationFamily(PerturbationKind kind, CoefficientSet base);

  PerturbationKind kind_;
  CoefficientSet base_;
  DiffusionField psi_;
  DriftField shift_;
  double sup_ = 0.0;
  std::optional<MollifierKernel> rho_;
  Box diagnostic_box_;
};

/// Sampled audit of the boundedness, ellipticity and Hoelder assumptions.
struct DiagnosticGrids {
  std::vector<double> times{0.0};
  Box box = Box::cube(1, -6.0, 6.0);
  int points_per_axis = 2001;
  PairSampler sampler = PairSampler::for_dim(1);
};

struct AssumptionReport {
  double sup_drift = 0.0;
  double sup_diffusion = 0.0;
  double eig_min = 0.0;  // eigenvalues of a
  double eig_max = 0.0;
  double sigma_holder = 0.0;
  double drift_holder = 0.0;
  bool sigma_holder_blowup = false;
  bool drift_holder_blowup = false;  // flagged: drift is not Hoelder (allowed, informational)

  bool pass_K1 = false;
  bool pass_K2 = false;
  bool pass_Lambda = false;
  bool pass_kappa = false;

  bool passed() const { return pass_K1 && pass_K2 && pass_Lambda && pass_kappa; }
};

AssumptionReport assumption_report(const CoefficientSet& set, const DiagnosticGrids& grids);

/// Visits every point of the n^d tensor grid over the box.
void for_each_grid_point(const Box& box, int points_per_axis,
                         const std::function<void(const Point&)>& visit);

}  // namespace parametrix
